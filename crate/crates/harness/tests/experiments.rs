mod common;

use ckd_core::adaptive::{subnet_forward, SubnetSpec};
use ckd_core::baselines::ObjectiveKind;
use ckd_core::model::encoder_forward;
use ckd_harness::adaptive::{evaluate_grid, grid_tag, run_adaptive, Phase};
use ckd_harness::bench::{bench_relations, linear_fit, loglog_slope, BenchConfig, Kernel};
use ckd_harness::checks::{compat_grid, compat_table, loss_gradchecks, CheckSetup};
use ckd_harness::suite::{ablation_suite, window_sweep, AblationCell};
use common::tiny_teacher;

#[test]
fn ablation_table_has_four_cells_of_all_seeds() {
    let (cfg, data, teacher) = tiny_teacher();
    let res = ablation_suite(&teacher.params, &cfg, &data).unwrap();
    let names: Vec<&str> = res.cells.iter().map(|c| c.cell.as_str()).collect();
    assert_eq!(names, ["CKD", "-WR", "-LTR", "-WR-LTR"]);
    assert_eq!(res.rows.len(), 4 * cfg.suite.num_seeds);
    for c in &res.cells {
        assert_eq!(c.runs, cfg.suite.num_seeds);
        assert_eq!(c.seeds, "3;4");
    }
    for (row, rec) in res.rows.iter().zip(&res.records) {
        assert_eq!(row.seed, rec.seed);
        assert_eq!(rec.objective, Some(ObjectiveKind::Ckd));
        let cell = AblationCell::ALL.iter().find(|c| c.name() == row.cell).unwrap();
        assert_eq!(rec.config, cell.apply(&ckd_harness::config::ExperimentConfig { seed: row.seed, ..cfg.clone() }));
    }
    // parallel runs match sequential ones
    let one = ckd_harness::train::distill(&teacher.params, &res.records[5].config, &data).unwrap();
    assert_eq!(one.record.metrics, res.records[5].metrics);
}

#[test]
fn window_sweep_labels_cells_by_delta() {
    let (mut cfg, data, teacher) = tiny_teacher();
    cfg.suite.num_seeds = 1;
    let deltas = cfg.sweep_deltas();
    assert_eq!(deltas, [1, 2, 4, 8, 16]);
    let res = window_sweep(&teacher.params, &cfg, &data, &deltas[..2]).unwrap();
    let names: Vec<&str> = res.cells.iter().map(|c| c.cell.as_str()).collect();
    assert_eq!(names, ["1", "2"]);
    assert_eq!(res.records[1].config.distill.delta, 2);
}

#[test]
fn fits_recover_exact_laws() {
    let xs = [1.0, 2.0, 3.0, 5.0];
    let f = linear_fit(&xs, &xs.map(|x| 4.0 * x - 1.0));
    assert!((f.slope - 4.0).abs() < 1e-12 && (f.intercept + 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
    assert!((loglog_slope(&xs, &xs.map(|x| 7.0 * x * x * x)) - 3.0).abs() < 1e-12);
}

#[test]
fn benchmark_reports_every_point() {
    let cfg = BenchConfig {
        ns: vec![8, 16, 32],
        deltas: vec![2, 4, 8],
        d: 4,
        delta_series_n: 64,
        n_series_delta: 2,
        seed: 1,
    };
    let r = bench_relations(&cfg).unwrap();
    assert_eq!(r.rows.len(), 3 + 3 + 3);
    let naive: Vec<_> = r.rows.iter().filter(|x| x.kernel == Kernel::Naive).collect();
    for x in naive {
        assert_eq!(x.triple_ops, (x.n as u64).pow(3) * cfg.d as u64);
    }
    assert!((r.naive_ops_slope_n - 3.0).abs() < 1e-9);
    assert!(r.windowed_aux_fit_n.r2 > 0.99);
    assert!(bench_relations(&BenchConfig { ns: vec![8], ..cfg }).is_err());
}

#[test]
fn every_loss_passes_its_gradient_check() {
    let rows = loss_gradchecks(&CheckSetup::default()).unwrap();
    assert_eq!(rows.iter().filter(|r| r.wrt == "params").count(), 8);
    for r in &rows {
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.checked > 0);
    }
}

#[test]
fn compat_table_covers_every_objective() {
    let pairs = compat_grid();
    assert_eq!(pairs.len(), 12);
    let rows = compat_table(&pairs);
    assert_eq!(rows.len(), 12 * ObjectiveKind::ALL.len());
    for r in &rows {
        assert_eq!(r.compatible, r.violations.is_empty());
        if r.objective == "ckd" || r.objective == "logit_only" {
            assert!(r.compatible);
        }
    }
}

#[test]
fn adaptive_phases_run_and_tag_their_grid() {
    let (mut cfg, data, teacher) = tiny_teacher();
    cfg.adaptive.widths = vec![1.0, 0.5];
    cfg.adaptive.depths = vec![1.0, 0.5];
    let rw = run_adaptive(&teacher.params, &cfg, &data, Phase::Rewire).unwrap();
    assert!(rw.width_run.is_none() && rw.full_run.is_none());
    for ex in data.dev.iter().take(8) {
        let a = encoder_forward(&ex.tokens, &teacher.params).unwrap().logits;
        let b = subnet_forward(&rw.rewired, SubnetSpec::full(), &ex.tokens).unwrap().logits;
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-9));
    }

    let full = run_adaptive(&teacher.params, &cfg, &data, Phase::Full).unwrap();
    assert_eq!(full.initial_width_losses.len(), 2);
    let w = full.width_run.as_ref().unwrap();
    let f = full.full_run.as_ref().unwrap();
    assert_eq!(w.history.len(), cfg.adaptive.steps);
    assert_eq!(w.specs.len(), 2);
    assert_eq!(f.specs.len(), 4);
    let ckpt = full.checkpoint(&cfg);
    assert_eq!(ckpt.metadata["subnet_grid"], grid_tag(&[1.0, 0.5], &[1.0, 0.5]));
    assert_eq!(ckpt.params, f.student);
    let grid = evaluate_grid(&ckpt.params, &[1.0, 0.5], &[1.0, 0.5], &data).unwrap();
    assert_eq!(grid.len(), 4);
    assert!(grid.iter().all(|g| (0.0..=1.0).contains(&g.dev_accuracy)));
}
