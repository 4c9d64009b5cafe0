//! Multi-run experiments: component ablation and window-size sweep.
//!
//! Independent runs execute on the rayon pool. Each run owns its state, and
//! results are collected in job order.

use std::fmt;

use ckd_core::baselines::ObjectiveKind;
use ckd_core::model::ParamSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::record::RunRecord;
use crate::task::Dataset;
use crate::train::{distill_cached, teacher_states, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationCell {
    #[serde(rename = "CKD")]
    Full,
    #[serde(rename = "-WR")]
    NoWr,
    #[serde(rename = "-LTR")]
    NoLtr,
    #[serde(rename = "-WR-LTR")]
    NoWrLtr,
}

impl AblationCell {
    pub const ALL: [AblationCell; 4] = [Self::Full, Self::NoWr, Self::NoLtr, Self::NoWrLtr];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "CKD",
            Self::NoWr => "-WR",
            Self::NoLtr => "-LTR",
            Self::NoWrLtr => "-WR-LTR",
        }
    }

    /// `cfg` with this cell's components switched off.
    pub fn apply(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.objective = ObjectiveKind::Ckd;
        c.distill.use_wr = !matches!(self, Self::NoWr | Self::NoWrLtr);
        c.distill.use_ltr = !matches!(self, Self::NoLtr | Self::NoWrLtr);
        c
    }
}

impl fmt::Display for AblationCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One run of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub cell: String,
    pub seed: u64,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    pub final_train_loss: f64,
}

/// Mean metrics of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub runs: usize,
    pub mean_dev_accuracy: f64,
    pub mean_test_accuracy: f64,
    /// Seeds of the runs, `;`-separated.
    pub seeds: String,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub rows: Vec<RunRow>,
    pub cells: Vec<CellSummary>,
    pub records: Vec<RunRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs every `(cell label, config)` job and summarises by label, keeping
/// the order in which labels first appear.
fn run_jobs(
    teacher: &ParamSet,
    data: &Dataset,
    jobs: Vec<(String, ExperimentConfig)>,
) -> Result<SuiteResult> {
    let cache = teacher_states(teacher, &data.train)?;
    let runs: Vec<TrainedModel> = jobs
        .par_iter()
        .map(|(_, cfg)| distill_cached(teacher, &cache, cfg, data))
        .collect::<Result<_>>()?;
    let rows: Vec<RunRow> = jobs
        .iter()
        .zip(&runs)
        .map(|((cell, _), run)| RunRow {
            cell: cell.clone(),
            seed: run.record.seed,
            dev_accuracy: run.record.metrics.dev_accuracy,
            test_accuracy: run.record.metrics.test_accuracy,
            final_train_loss: run.record.metrics.final_train_loss,
        })
        .collect();
    let mut labels: Vec<&str> = Vec::new();
    for r in &rows {
        if !labels.contains(&r.cell.as_str()) {
            labels.push(&r.cell);
        }
    }
    let cells = labels
        .iter()
        .map(|&label| {
            let mine: Vec<&RunRow> = rows.iter().filter(|r| r.cell == label).collect();
            CellSummary {
                cell: label.to_string(),
                runs: mine.len(),
                mean_dev_accuracy: mean(mine.iter().map(|r| r.dev_accuracy)),
                mean_test_accuracy: mean(mine.iter().map(|r| r.test_accuracy)),
                seeds: mine.iter().map(|r| r.seed.to_string()).collect::<Vec<_>>().join(";"),
            }
        })
        .collect();
    Ok(SuiteResult {
        rows,
        cells,
        records: runs.into_iter().map(|r| r.record).collect(),
    })
}

fn seeded(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        ..cfg.clone()
    }
}

/// Distills one student per (cell, seed) with the CKD objective and the
/// named components removed.
pub fn ablation_suite(teacher: &ParamSet, cfg: &ExperimentConfig, data: &Dataset) -> Result<SuiteResult> {
    cfg.validate()?;
    let jobs = AblationCell::ALL
        .iter()
        .flat_map(|&cell| {
            cfg.suite_seeds()
                .into_iter()
                .map(move |seed| (cell.name().to_string(), seeded(&cell.apply(cfg), seed)))
        })
        .collect();
    run_jobs(teacher, data, jobs)
}

/// One CKD distillation per (δ, seed). Cells are labelled by δ.
pub fn window_sweep(
    teacher: &ParamSet,
    cfg: &ExperimentConfig,
    data: &Dataset,
    deltas: &[usize],
) -> Result<SuiteResult> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for &delta in deltas {
        for seed in cfg.suite_seeds() {
            let mut c = seeded(cfg, seed);
            c.objective = ObjectiveKind::Ckd;
            c.distill.delta = delta;
            jobs.push((delta.to_string(), c));
        }
    }
    run_jobs(teacher, data, jobs)
}
