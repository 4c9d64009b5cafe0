use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ckd_harness::adaptive::{evaluate_grid, run_adaptive, Phase};
use ckd_harness::bench::{bench_relations, BenchConfig};
use ckd_harness::checks::{arch_label, compat_grid, compat_table, loss_gradchecks, CheckSetup};
use ckd_harness::config::ExperimentConfig;
use ckd_harness::record::{fingerprint, write_csv, RunRecord};
use ckd_harness::suite::{ablation_suite, window_sweep, SuiteResult};
use ckd_harness::task::generate_task;
use ckd_harness::train::{distill, evaluate, reproduce, train_teacher, TrainedModel};
use ckd_core::model::{Checkpoint, ParamSet};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ckd", version, about = "Contextual knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; keys not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set distill.delta=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct Training {
    #[command(flatten)]
    common: Common,
    /// Sets the `seed` key.
    #[arg(long, required = true)]
    seed: u64,
}

#[derive(Args)]
struct WithTeacher {
    #[command(flatten)]
    training: Training,
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Rewire,
    Width,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune a teacher on the configured task.
    TrainTeacher(Training),
    /// Distill a student from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        run: WithTeacher,
        /// Sets the `objective` key.
        #[arg(long)]
        objective: Option<String>,
    },
    /// Accuracy of a checkpoint, or rerun a record and compare its metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "record")]
        checkpoint: Option<PathBuf>,
        /// Run record to reproduce.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Teacher checkpoint for reproducing a distillation record.
        #[arg(long, requires = "record")]
        teacher: Option<PathBuf>,
    },
    /// Four-cell component ablation over the configured seeds.
    Ablate(WithTeacher),
    /// CKD accuracy against window size.
    WindowSweep(WithTeacher),
    /// Importance rewiring and adaptive width/depth training.
    Adaptive {
        #[command(flatten)]
        run: WithTeacher,
        /// Last phase to run.
        #[arg(long, value_enum, default_value = "full")]
        phase: PhaseArg,
    },
    /// Compatibility of every objective with a grid of architecture pairs.
    CheckCompat(Common),
    /// Finite-difference checks of every loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cost of the naive and windowed relation kernels.
    BenchRelations {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
        ns: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
        deltas: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        d: usize,
    },
}

fn load_config(common: &Common, extra: &[String]) -> Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    Ok(ExperimentConfig::load(common.config.as_deref(), &overrides)?)
}

fn training_config(t: &Training, extra: &[String]) -> Result<ExperimentConfig> {
    let mut e = vec![format!("seed={}", t.seed)];
    e.extend_from_slice(extra);
    load_config(&t.common, &e)
}

fn out_dir(p: &Path) -> Result<&Path> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    Ok(p)
}

fn load_params(path: &Path) -> Result<ParamSet> {
    Ok(Checkpoint::load(path)
        .with_context(|| format!("loading {}", path.display()))?
        .params)
}

fn save_run(dir: &Path, stem: &str, run: &TrainedModel) -> Result<()> {
    Checkpoint::new(run.params.clone())
        .with_meta("seed", run.record.seed.to_string())
        .save(dir.join(format!("{stem}.ckpt")))?;
    run.record.save(dir.join(format!("{stem}.run.json")))?;
    run.record.write_loss_stream(dir.join(format!("{stem}.steps.jsonl")))?;
    let m = run.record.metrics;
    println!(
        "{stem}: dev {:.4} test {:.4} final loss {:.6} ({:.1}s)",
        m.dev_accuracy, m.test_accuracy, m.final_train_loss, run.record.wall_time_s
    );
    Ok(())
}

fn save_suite(dir: &Path, stem: &str, res: &SuiteResult) -> Result<()> {
    write_csv(dir.join(format!("{stem}_runs.csv")), &res.rows)?;
    write_csv(dir.join(format!("{stem}.csv")), &res.cells)?;
    for (row, r) in res.rows.iter().zip(&res.records) {
        let cell: String = row.cell.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        let name = format!("{stem}_{cell}_{}", r.seed);
        r.save(dir.join(format!("{name}.run.json")))?;
        r.write_loss_stream(dir.join(format!("{name}.steps.jsonl")))?;
    }
    for c in &res.cells {
        println!(
            "{:>8}  runs {}  dev {:.4}  test {:.4}  seeds {}",
            c.cell, c.runs, c.mean_dev_accuracy, c.mean_test_accuracy, c.seeds
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::TrainTeacher(t) => {
            let cfg = training_config(&t, &[])?;
            let dir = out_dir(&t.common.out)?;
            let data = generate_task(&cfg.task)?;
            let run = train_teacher(&cfg, &data)?;
            save_run(dir, "teacher", &run)?;
        }
        Command::Distill { run, objective } => {
            let extra: Vec<String> = objective.iter().map(|o| format!("objective=\"{o}\"")).collect();
            let cfg = training_config(&run.training, &extra)?;
            let dir = out_dir(&run.training.common.out)?;
            let teacher = load_params(&run.teacher)?;
            let data = generate_task(&cfg.task)?;
            let student = distill(&teacher, &cfg, &data)?;
            save_run(dir, &format!("student_{}", cfg.objective.name()), &student)?;
        }
        Command::Eval {
            common,
            checkpoint,
            record,
            teacher,
        } => {
            if let Some(path) = record {
                let rec = RunRecord::load(&path)?;
                let teacher = teacher.as_deref().map(load_params).transpose()?;
                let rerun = reproduce(&rec, teacher.as_ref())?;
                let same = rerun.record.metrics == rec.metrics;
                println!(
                    "recorded dev {:.6} test {:.6}; rerun dev {:.6} test {:.6}; identical: {same}",
                    rec.metrics.dev_accuracy,
                    rec.metrics.test_accuracy,
                    rerun.record.metrics.dev_accuracy,
                    rerun.record.metrics.test_accuracy
                );
                if !same {
                    bail!("rerun metrics differ from the record");
                }
                return Ok(());
            }
            let Some(path) = checkpoint else {
                bail!("eval needs --checkpoint or --record");
            };
            let cfg = load_config(&common, &[])?;
            let ckpt = Checkpoint::load(&path)?;
            let data = generate_task(&cfg.task)?;
            println!(
                "{} ({}): fingerprint {}",
                path.display(),
                arch_label(&ckpt.params.config),
                fingerprint(&ckpt.params)
            );
            println!(
                "dev {:.4} test {:.4}",
                evaluate(&ckpt.params, &data.dev)?,
                evaluate(&ckpt.params, &data.test)?
            );
            if ckpt.metadata.contains_key("subnet_grid") {
                let dir = out_dir(&common.out)?;
                let grid = evaluate_grid(&ckpt.params, &cfg.adaptive.widths, &cfg.adaptive.depths, &data)?;
                for g in &grid {
                    println!("width {:.2} depth {:.2}: dev {:.4}", g.width, g.depth, g.dev_accuracy);
                }
                write_csv(dir.join("subnet_grid.csv"), &grid)?;
            }
        }
        Command::Ablate(run) => {
            let cfg = training_config(&run.training, &[])?;
            let dir = out_dir(&run.training.common.out)?;
            let teacher = load_params(&run.teacher)?;
            let data = generate_task(&cfg.task)?;
            save_suite(dir, "ablation", &ablation_suite(&teacher, &cfg, &data)?)?;
        }
        Command::WindowSweep(run) => {
            let cfg = training_config(&run.training, &[])?;
            let dir = out_dir(&run.training.common.out)?;
            let teacher = load_params(&run.teacher)?;
            let data = generate_task(&cfg.task)?;
            let res = window_sweep(&teacher, &cfg, &data, &cfg.sweep_deltas())?;
            save_suite(dir, "window_sweep", &res)?;
        }
        Command::Adaptive { run, phase } => {
            let cfg = training_config(&run.training, &[])?;
            let dir = out_dir(&run.training.common.out)?;
            let teacher = load_params(&run.teacher)?;
            let data = generate_task(&cfg.task)?;
            let phase = match phase {
                PhaseArg::Rewire => Phase::Rewire,
                PhaseArg::Width => Phase::Width,
                PhaseArg::Full => Phase::Full,
            };
            let out = run_adaptive(&teacher, &cfg, &data, phase)?;
            fs::write(dir.join("importance.json"), serde_json::to_string_pretty(&out.scores)?)?;
            let ckpt = out.checkpoint(&cfg);
            ckpt.save(dir.join("adaptive.ckpt"))?;
            for (name, r) in [("width", &out.width_run), ("full", &out.full_run)] {
                if let Some(r) = r {
                    let lines: Vec<String> = r
                        .history
                        .iter()
                        .map(serde_json::to_string)
                        .collect::<std::result::Result<_, _>>()?;
                    fs::write(dir.join(format!("adaptive_{name}.steps.jsonl")), lines.join("\n") + "\n")?;
                }
            }
            let (widths, depths) = match phase {
                Phase::Rewire => (vec![1.0], vec![1.0]),
                Phase::Width => (cfg.adaptive.widths.clone(), vec![1.0]),
                Phase::Full => (cfg.adaptive.widths.clone(), cfg.adaptive.depths.clone()),
            };
            let grid = evaluate_grid(&ckpt.params, &widths, &depths, &data)?;
            for g in &grid {
                println!("width {:.2} depth {:.2}: dev {:.4} test {:.4}", g.width, g.depth, g.dev_accuracy, g.test_accuracy);
            }
            write_csv(dir.join("subnet_grid.csv"), &grid)?;
        }
        Command::CheckCompat(common) => {
            let cfg = load_config(&common, &[])?;
            let mut pairs = compat_grid();
            pairs.push((cfg.teacher_config(), cfg.student_config()));
            let rows = compat_table(&pairs);
            println!("{:<14} {:<14} {:<16} {:<4} violations", "teacher", "student", "objective", "ok");
            for r in &rows {
                let ok = if r.compatible { "yes" } else { "no" };
                println!("{:<14} {:<14} {:<16} {:<4} {}", r.teacher, r.student, r.objective, ok, r.violations);
            }
            write_csv(out_dir(&common.out)?.join("compat.csv"), &rows)?;
        }
        Command::Gradcheck { common, seed } => {
            let rows = loss_gradchecks(&CheckSetup {
                seed,
                ..Default::default()
            })?;
            for r in &rows {
                println!(
                    "{:<20} wrt {:<10} {:>6} coords  max rel err {:.3e} at {}",
                    r.target, r.wrt, r.checked, r.max_rel_error, r.worst
                );
            }
            write_csv(out_dir(&common.out)?.join("gradcheck.csv"), &rows)?;
        }
        Command::BenchRelations { out, ns, deltas, d } => {
            let report = bench_relations(&BenchConfig {
                ns,
                deltas,
                d,
                ..Default::default()
            })?;
            write_csv(out_dir(&out)?.join("bench_relations.csv"), &report.rows)?;
            println!(
                "naive ops ~ n^{:.3}; windowed ops ~ δ^{:.3}; windowed aux vs n: slope {:.2}, R² {:.5}",
                report.naive_ops_slope_n,
                report.windowed_ops_slope_delta,
                report.windowed_aux_fit_n.slope,
                report.windowed_aux_fit_n.r2
            );
        }
    }
    Ok(())
}
