//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ckd_core::adaptive::{
    accumulate_gradients, active_parameters, estimate_importance, evaluate_terms, rewire, subnet_forward,
    train_adaptive_width, width_terms, SubnetSpec,
};
use ckd_core::baselines::{check_compatibility, ObjectiveKind};
use ckd_core::distill::{align_layers, ckd_ltr_loss, ckd_wr_loss, DistillConfig};
use ckd_core::gradcheck::gradcheck;
use ckd_core::model::{encoder_forward, LayerStates, ModelConfig, ParamSet, TokenSequence};
use ckd_core::relations::{windowed_relations, PairKind};
use ckd_harness::adaptive::adaptive_config;
use ckd_harness::bench::{bench_relations, BenchConfig};
use ckd_harness::checks::{compat_grid, compat_table, loss_gradchecks, CheckSetup};
use ckd_harness::config::ExperimentConfig;
use ckd_harness::record::{fingerprint, RunRecord};
use ckd_harness::suite::{ablation_suite, AblationCell};
use ckd_harness::task::{generate_task, Dataset};
use ckd_harness::train::{distill, distill_cached, reproduce, teacher_states, train_teacher, TrainedModel};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn small(layers: usize, d: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: d,
        num_heads: heads,
        ffn_dim: 2 * d,
        vocab_size: 12,
        max_seq_len: 8,
        num_classes: 3,
        dropout: 0.0,
    }
}

fn states_of(c: &ModelConfig, seed: u64) -> LayerStates {
    let p = ParamSet::init(c, 0.4, &mut ChaCha8Rng::seed_from_u64(seed));
    let tokens = TokenSequence::new(vec![1, 4, 9, 3, 7, 5, 2], vec![true, true, true, true, true, true, false]).unwrap();
    encoder_forward(&tokens, &p).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let rows = loss_gradchecks(&CheckSetup::default()).unwrap();
    let worst = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let losses_ok = rows.iter().all(|r| r.max_rel_error < 1e-4) && rows.iter().filter(|r| r.wrt == "params").count() == 8;

    // quadratic ½xᵀAx + bᵀx with gradient Ax + b; central differences are
    // exact for it at any step, so a wide step keeps round-off small
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = uniform(&mut rng, (6, 6));
    let a = m.t().dot(&m);
    let b = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
    let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |v: &[f64]| {
        let v = Array1::from(v.to_vec());
        0.5 * v.dot(&a.dot(&v)) + b.dot(&v)
    };
    let g = a.dot(&Array1::from(x.clone())) + &b;
    let quad = gradcheck(f, &x, g.as_slice().unwrap(), 1e-3).unwrap().max_rel_error;

    // corrupted WR gradient must be flagged
    let (s, t) = (states_of(&small(2, 16, 2), 1), states_of(&small(3, 24, 2), 2));
    let align = align_layers(3, 2).unwrap();
    let cfg = DistillConfig {
        delta: 2,
        ..Default::default()
    };
    let term = ckd_wr_loss(&s, &t, &align, &cfg).unwrap();
    let layer = *term.grads.reps.keys().max().unwrap();
    let mut bad = term.grads.reps[&layer].clone();
    bad[[3, 2]] += 0.5 * bad[[3, 2]].abs() + 1e-3;
    let x0: Vec<f64> = s.reps[layer].iter().copied().collect();
    let fault = gradcheck(
        |v| {
            let mut reps = s.reps.clone();
            reps[layer] = Array2::from_shape_vec(s.reps[layer].raw_dim(), v.to_vec()).unwrap();
            let st = LayerStates::from_parts(reps, s.attn.clone(), s.values.clone(), s.logits.clone(), s.mask.clone());
            ckd_wr_loss(&st, &t, &align, &cfg).unwrap().weighted
        },
        &x0,
        &bad.iter().copied().collect::<Vec<_>>(),
        1e-5,
    )
    .unwrap()
    .max_rel_error;

    let secs = start.elapsed().as_secs_f64();
    let pass = losses_ok && quad < 1e-10 && fault > 1e-2 && secs < 120.0;
    (
        pass,
        format!(
            "{} checks, worst {:.2e} ({} wrt {} at {}) < 1e-4; quadratic {quad:.1e} < 1e-10; corrupted {fault:.2e} > 1e-2; {secs:.1}s < 120s",
            rows.len(),
            worst.max_rel_error,
            worst.target,
            worst.wrt,
            worst.worst
        ),
    )
}

/// Brute-force cosine of the angle at `j`, `None` for degenerate triples.
fn oracle_angle(r: &Array2<f64>, i: usize, j: usize, k: usize) -> Option<f64> {
    let a: Vec<f64> = (0..r.nrows()).map(|x| r[[x, i]] - r[[x, j]]).collect();
    let b: Vec<f64> = (0..r.nrows()).map(|x| r[[x, k]] - r[[x, j]]).collect();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    (na > 1e-8 && nb > 1e-8).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut instances, mut triples, mut worst) = (0usize, 0usize, 0.0f64);
    let mut membership_ok = true;
    for _ in 0..300 {
        let n = rng.random_range(1..=12);
        let d = rng.random_range(1..=8);
        let r = uniform(&mut rng, (d, n));
        let full = rng.random_bool(0.5);
        let delta = if full { rng.random_range(n.saturating_sub(1)..=n + 2) } else { rng.random_range(0..n.max(1)) };
        let mask: Vec<bool> = (0..n).map(|i| i == 0 || full || rng.random_bool(0.8)).collect();
        let set = windowed_relations(r.view(), delta, PairKind::L2, &mask);
        instances += 1;
        for j in 0..n {
            for i in 0..n {
                for k in 0..n {
                    let inside = |a: usize| a != j && mask[a] && a.abs_diff(j) <= delta;
                    let expect = if mask[j] && inside(i) && inside(k) {
                        Some(oracle_angle(&r, i, j, k).unwrap_or(0.0))
                    } else {
                        None
                    };
                    match (set.triple(i, j, k), expect) {
                        (Some(v), Some(e)) => {
                            worst = worst.max((v - e).abs());
                            triples += 1;
                        }
                        (None, None) => {}
                        _ => membership_ok = false,
                    }
                }
            }
        }
    }
    (
        membership_ok && worst <= 1e-12 && instances >= 200,
        format!("{instances} instances, {triples} triples, max |windowed − brute force| {worst:.1e} ≤ 1e-12, window membership exact: {membership_ok}"),
    )
}

/// Random orthogonal matrix from Gram-Schmidt.
fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let m = uniform(rng, (d, d));
    let mut q = Array2::<f64>::zeros((d, d));
    for c in 0..d {
        let mut v = m.column(c).to_owned();
        for p in 0..c {
            let u = q.column(p);
            v = &v - &(&u * u.dot(&v));
        }
        let nrm = v.dot(&v).sqrt();
        q.column_mut(c).assign(&(v / nrm));
    }
    q
}

fn criterion_3() -> Outcome {
    let c = small(2, 16, 2);
    let t = states_of(&c, 5);
    let align = align_layers(2, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = true;
    let mut worst = 0.0f64;
    for kind in [PairKind::L2, PairKind::Cosine] {
        let cfg = DistillConfig {
            delta: 3,
            pair_kind: kind,
            ..Default::default()
        };
        let same = t.clone();
        exact &= ckd_wr_loss(&same, &t, &align, &cfg).unwrap().weighted == 0.0;
        exact &= ckd_ltr_loss(&same, &t, &align, &cfg).unwrap().weighted == 0.0;
        // distances and angles survive rotation plus translation; cosines only rotation
        let q = orthogonal(c.hidden_dim, &mut rng);
        let shift = if kind == PairKind::L2 { uniform(&mut rng, (c.hidden_dim, 1)) } else { Array2::zeros((c.hidden_dim, 1)) };
        let reps: Vec<Array2<f64>> = t.reps.iter().map(|r| q.dot(r) + &shift).collect();
        let iso = LayerStates::from_parts(reps, t.attn.clone(), t.values.clone(), t.logits.clone(), t.mask.clone());
        worst = worst
            .max(ckd_wr_loss(&iso, &t, &align, &cfg).unwrap().weighted.abs())
            .max(ckd_ltr_loss(&iso, &t, &align, &cfg).unwrap().weighted.abs());
    }
    (
        exact && worst < 1e-9,
        format!("identical student gives exactly 0: {exact}; isometric student max loss {worst:.1e} < 1e-9"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let r = bench_relations(&BenchConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = (r.naive_ops_slope_n - 3.0).abs() <= 0.15
        && (r.windowed_ops_slope_delta - 2.0).abs() <= 0.2
        && r.windowed_aux_fit_n.r2 > 0.99
        && secs < 300.0;
    (
        pass,
        format!(
            "naive ops slope in n {:.3} (3 ± 0.15); windowed ops slope in δ {:.3} (2 ± 0.2); windowed aux vs n R² {:.6} > 0.99; {secs:.1}s < 300s",
            r.naive_ops_slope_n, r.windowed_ops_slope_delta, r.windowed_aux_fit_n.r2
        ),
    )
}

fn criterion_5() -> Outcome {
    let grid = compat_grid();
    let mut mismatches = 0;
    for (t, s) in &grid {
        for kind in ObjectiveKind::ALL {
            let expect_ok = match kind {
                ObjectiveKind::DistilbertCos | ObjectiveKind::PkdPatient => t.hidden_dim == s.hidden_dim,
                ObjectiveKind::Tinybert | ObjectiveKind::Minilm => t.num_heads == s.num_heads,
                ObjectiveKind::LogitOnly | ObjectiveKind::Ckd => true,
            };
            if check_compatibility(t, s, kind).is_empty() != expect_ok {
                mismatches += 1;
            }
        }
    }
    let table = compat_table(&grid);
    let has_analogue = grid
        .iter()
        .any(|(t, s)| (t.num_layers, t.hidden_dim, s.num_layers, s.hidden_dim) == (12, 768, 4, 512));
    (
        mismatches == 0 && grid.len() == 12 && has_analogue,
        format!(
            "{} pairs × {} objectives, {} rows, {mismatches} disagreements with the embedding/head rules; 12/768→4/512 present: {has_analogue}",
            grid.len(),
            ObjectiveKind::ALL.len(),
            table.len()
        ),
    )
}

fn criterion_6() -> Outcome {
    let twelve = align_layers(12, 6).unwrap();
    let expected: Vec<(usize, usize)> = (0..=6).map(|m| (m, 2 * m)).collect();
    let example_ok = twelve.pairs == expected;
    let mut checked = 0;
    let mut props_ok = true;
    for lt in 1..=24 {
        for ls in 1..=lt {
            let a = align_layers(lt, ls).unwrap();
            checked += 1;
            props_ok &= a.pairs.first() == Some(&(0, 0)) && a.pairs.last() == Some(&(ls, lt));
            props_ok &= a.pairs.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1);
            props_ok &= a.pairs.iter().all(|&(s, t)| s * lt == t * ls);
            if lt % ls == 0 {
                props_ok &= a.pairs.len() == ls + 1;
            }
        }
    }
    (
        example_ok && props_ok,
        format!("(12, 6) maps m→2m for m = 1..6: {example_ok}; monotone/endpoint/uniform properties over {checked} pairs: {props_ok}"),
    )
}

struct Desk {
    cfg: ExperimentConfig,
    data: Dataset,
    teacher: TrainedModel,
    logit_runs: Vec<TrainedModel>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_7(desk: &mut Option<Desk>) -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let data = generate_task(&cfg.task).unwrap();
    let teacher = train_teacher(&cfg, &data).unwrap();
    let t_acc = teacher.record.metrics.dev_accuracy;
    let cache = teacher_states(&teacher.params, &data.train).unwrap();
    let run = |kind: ObjectiveKind, seed: u64| {
        let c = ExperimentConfig {
            seed,
            objective: kind,
            ..cfg.clone()
        };
        distill_cached(&teacher.params, &cache, &c, &data).unwrap()
    };
    let seeds = cfg.suite_seeds();
    let ckd: Vec<f64> = seeds.iter().map(|&s| run(ObjectiveKind::Ckd, s).record.metrics.dev_accuracy).collect();
    let logit_runs: Vec<TrainedModel> = seeds.iter().map(|&s| run(ObjectiveKind::LogitOnly, s)).collect();
    let logit: Vec<f64> = logit_runs.iter().map(|r| r.record.metrics.dev_accuracy).collect();
    let blocked = [ObjectiveKind::Tinybert, ObjectiveKind::Minilm]
        .iter()
        .all(|&k| !check_compatibility(&teacher.params.config, &cfg.student_config(), k).is_empty());
    let secs = start.elapsed().as_secs_f64();
    let (mc, ml) = (mean(&ckd), mean(&logit));
    let pass = t_acc >= 0.97 && mc >= ml - 0.005 && blocked && secs < 1200.0;
    let detail = format!(
        "teacher 4/64/4 dev {t_acc:.4} ≥ 0.97; student 2/32/2 over seeds {seeds:?}: CKD mean {mc:.4} {ckd:?} vs logit-only mean {ml:.4} {logit:?} (need ≥ {:.4}); TinyBERT/MiniLM blocked: {blocked}; {secs:.0}s < 1200s",
        ml - 0.005
    );
    *desk = Some(Desk {
        cfg,
        data,
        teacher,
        logit_runs,
    });
    (pass, detail)
}

fn criterion_8(desk: &Desk, short: &mut Vec<RunRecord>) -> Outcome {
    let start = Instant::now();
    let mut cfg = desk.cfg.clone();
    cfg.student_train.epochs = 2;
    let res = ablation_suite(&desk.teacher.params, &cfg, &desk.data).unwrap();
    let names: Vec<&str> = res.cells.iter().map(|c| c.cell.as_str()).collect();
    let shape_ok = names == ["CKD", "-WR", "-LTR", "-WR-LTR"]
        && res.cells.iter().all(|c| c.runs == cfg.suite.num_seeds)
        && res.rows.len() == 4 * cfg.suite.num_seeds;
    let mut identical = true;
    for (row, rec) in res.rows.iter().zip(&res.records) {
        if row.cell != AblationCell::NoWrLtr.name() {
            continue;
        }
        let lo = ExperimentConfig {
            seed: row.seed,
            objective: ObjectiveKind::LogitOnly,
            ..cfg.clone()
        };
        let b = distill(&desk.teacher.params, &lo, &desk.data).unwrap();
        identical &= b.record.metrics == rec.metrics
            && b.record.steps.iter().zip(&rec.steps).all(|(x, y)| x.losses == y.losses && x.lr == y.lr);
    }
    short.push(res.records[0].clone());
    let cells: Vec<String> = res.cells.iter().map(|c| format!("{} {:.4}", c.cell, c.mean_dev_accuracy)).collect();
    (
        shape_ok && identical,
        format!(
            "4 cells × {} seeds ran ({}; 2-epoch budget); −WR−LTR bit-identical to logit-only: {identical}; {:.0}s",
            cfg.suite.num_seeds,
            cells.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_9(desk: &Desk) -> Outcome {
    let teacher = &desk.teacher.params;
    let c = teacher.config.clone();
    let dev = &desk.data.dev[..100];

    let scores = estimate_importance(teacher, dev, 32).unwrap();
    let rewired = rewire(teacher, &scores).unwrap();
    let mut drift = 0.0f64;
    for ex in dev {
        let a = encoder_forward(&ex.tokens, teacher).unwrap().logits;
        let b = subnet_forward(&rewired, SubnetSpec::full(), &ex.tokens).unwrap().logits;
        drift = drift.max((&a - &b).iter().fold(0.0, |m, d| m.max(d.abs())));
    }

    let sets: Vec<_> = [0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&w| active_parameters(&c, &SubnetSpec::new(w, 1.0).unwrap().structure(&c).unwrap()))
        .collect();
    let nested = sets.windows(2).all(|w| w[0].is_subset(&w[1]) && w[0].len() < w[1].len());

    let mut cfg = desk.cfg.clone();
    cfg.adaptive.widths = vec![1.0, 0.5];
    cfg.adaptive.steps = 200;
    let ac = adaptive_config(&cfg);
    let init = ParamSet::init(&c, 0.1, &mut ChaCha8Rng::seed_from_u64(99));
    let student = rewire(&init, &estimate_importance(&init, dev, 32).unwrap()).unwrap();
    let batch = &desk.data.train[..4];
    let terms = width_terms(&c, &c, &[1.0, 0.5]).unwrap();
    let both = accumulate_gradients(teacher, &student, &terms, batch, &ac).unwrap();
    let mut diff = both.total.clone();
    for w in [1.0, 0.5] {
        let single = accumulate_gradients(teacher, &student, &width_terms(&c, &c, &[w]).unwrap(), batch, &ac).unwrap();
        diff.add_scaled(&single.total, -1.0);
    }
    let acc_err = diff.max_abs();

    let before = evaluate_terms(teacher, &student, &terms, dev, &ac).unwrap();
    let run = train_adaptive_width(teacher, student, &[1.0, 0.5], &desk.data.train, &ac).unwrap();
    let after = evaluate_terms(teacher, &run.student, &terms, dev, &ac).unwrap();
    let lowered = before.iter().zip(&after).all(|(b, a)| a.total < b.total);
    let losses: Vec<String> = before
        .iter()
        .zip(&after)
        .zip([1.0, 0.5])
        .map(|((b, a), w)| format!("width {w}: {:.4} → {:.4}", b.total, a.total))
        .collect();
    (
        drift < 1e-9 && nested && acc_err <= 1e-10 && lowered && run.history.len() == 200,
        format!(
            "rewire logit drift {drift:.1e} < 1e-9; nesting 0.25 ⊂ 0.5 ⊂ 0.75 ⊂ 1: {nested}; accumulation error {acc_err:.1e} ≤ 1e-10; 200 steps lowered every width ({})",
            losses.join(", ")
        ),
    )
}

fn criterion_10(desk: &Desk, short: &[RunRecord]) -> Outcome {
    let mut checked = Vec::new();
    let mut ok = true;
    let path = std::env::temp_dir().join(format!("ckd-acceptance-{}.json", std::process::id()));
    for rec in desk.logit_runs.iter().take(1).map(|r| &r.record).chain(short) {
        rec.save(&path).unwrap();
        let loaded = RunRecord::load(&path).unwrap();
        let again = reproduce(&loaded, Some(&desk.teacher.params)).unwrap();
        ok &= loaded == *rec && again.record.metrics == rec.metrics && again.record.steps == rec.steps;
        checked.push(format!("{:?} seed {}", rec.objective.unwrap(), rec.seed));
    }
    std::fs::remove_file(&path).ok();
    // a teacher record of the same task at a one-epoch budget
    let mut tcfg = desk.cfg.clone();
    tcfg.teacher_train.epochs = 1;
    let t1 = train_teacher(&tcfg, &desk.data).unwrap();
    let again = reproduce(&t1.record, None).unwrap();
    ok &= again.record.metrics == t1.record.metrics && fingerprint(&again.params) == fingerprint(&t1.params);
    checked.push("teacher seed 0".into());
    (ok, format!("bit-identical reruns from saved records: {}", checked.join(", ")))
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome, results: &mut Vec<bool>) {
    let start = Instant::now();
    let (pass, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    });
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {verdict} [{name}] {detail} ({:.1}s)", start.elapsed().as_secs_f64());
    results.push(pass);
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    run(1, "gradient correctness", criterion_1, &mut results);
    run(2, "windowed vs brute-force relations", criterion_2, &mut results);
    run(3, "zero-loss fixed point", criterion_3, &mut results);
    run(4, "complexity counters", criterion_4, &mut results);
    run(5, "constraint matrix", criterion_5, &mut results);
    run(6, "layer alignment", criterion_6, &mut results);
    let mut desk = None;
    run(7, "desk-scale distillation", || criterion_7(&mut desk), &mut results);
    let mut short = Vec::new();
    match &desk {
        Some(d) => {
            run(8, "ablation structure", || criterion_8(d, &mut short), &mut results);
            run(9, "adaptive training", || criterion_9(d), &mut results);
            run(10, "reproducibility", || criterion_10(d, &short), &mut results);
        }
        None => {
            for (n, name) in [(8, "ablation structure"), (9, "adaptive training"), (10, "reproducibility")] {
                run(n, name, || (false, "needs the criterion 7 teacher".into()), &mut results);
            }
        }
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    assert_eq!(passed, results.len());
}
