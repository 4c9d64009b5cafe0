//! Adaptive width/depth training driven by an experiment config.

use ckd_core::adaptive::{
    estimate_importance, evaluate_terms, rewire, subnet_forward, train_adaptive_full, train_adaptive_width,
    width_terms, AdaptiveConfig, AdaptiveRun, ImportanceScores, SubnetSpec,
};
use ckd_core::distill::LossBreakdown;
use ckd_core::model::{Checkpoint, Example, ParamSet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::task::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Importance estimation and rewiring only.
    Rewire,
    /// Rewiring, then adaptive-width training.
    Width,
    /// All three phases.
    Full,
}

/// Core training settings for the adaptive phases of `cfg`.
pub fn adaptive_config(cfg: &ExperimentConfig) -> AdaptiveConfig {
    let a = &cfg.adaptive;
    let mut optim = cfg.student_train.optim(a.steps);
    optim.lr = a.lr;
    AdaptiveConfig {
        distill: ckd_core::distill::DistillConfig {
            alpha: 1.0,
            ..cfg.distill.clone()
        },
        optim,
        batch_size: a.batch_size,
        steps: a.steps,
        seed: cfg.seed,
        ..Default::default()
    }
}

/// Accuracy of one sub-network.
pub fn subnet_accuracy(params: &ParamSet, spec: SubnetSpec, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = examples
        .par_iter()
        .map(|ex| -> Result<usize> {
            let z = subnet_forward(params, spec, &ex.tokens)?.logits;
            let best = z
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            Ok(usize::from(best == ex.label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / examples.len() as f64)
}

/// Accuracy at one point of the (width, depth) grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub width: f64,
    pub depth: f64,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn evaluate_grid(params: &ParamSet, widths: &[f64], depths: &[f64], data: &Dataset) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &w in widths {
        for &d in depths {
            let spec = SubnetSpec::new(w, d)?;
            rows.push(GridRow {
                width: w,
                depth: d,
                dev_accuracy: subnet_accuracy(params, spec, &data.dev)?,
                test_accuracy: subnet_accuracy(params, spec, &data.test)?,
            });
        }
    }
    Ok(rows)
}

/// `"w:d,w:d,…"` tag of a trained sub-network grid.
pub fn grid_tag(widths: &[f64], depths: &[f64]) -> String {
    let mut parts = Vec::new();
    for w in widths {
        for d in depths {
            parts.push(format!("{w}:{d}"));
        }
    }
    parts.join(",")
}

#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    pub scores: ImportanceScores,
    pub rewired: ParamSet,
    pub width_run: Option<AdaptiveRun>,
    /// Per-width losses of the width terms before any update.
    pub initial_width_losses: Vec<LossBreakdown>,
    pub full_run: Option<AdaptiveRun>,
}

impl AdaptiveOutcome {
    /// The most trained model and the grid it was trained for.
    pub fn checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        let a = &cfg.adaptive;
        let (params, tag) = match (&self.full_run, &self.width_run) {
            (Some(r), _) => (r.student.clone(), grid_tag(&a.widths, &a.depths)),
            (None, Some(r)) => (r.student.clone(), grid_tag(&a.widths, &[1.0])),
            (None, None) => (self.rewired.clone(), grid_tag(&[1.0], &[1.0])),
        };
        Checkpoint::new(params)
            .with_meta("subnet_grid", tag)
            .with_meta("seed", cfg.seed.to_string())
    }
}

/// Runs the adaptive phases up to `phase`, starting from a copy of the
/// fine-tuned teacher.
pub fn run_adaptive(teacher: &ParamSet, cfg: &ExperimentConfig, data: &Dataset, phase: Phase) -> Result<AdaptiveOutcome> {
    cfg.validate()?;
    let a = &cfg.adaptive;
    let scores = estimate_importance(teacher, &data.dev, a.importance_batch)?;
    let rewired = rewire(teacher, &scores)?;
    let mut out = AdaptiveOutcome {
        scores,
        rewired,
        width_run: None,
        initial_width_losses: Vec::new(),
        full_run: None,
    };
    if phase == Phase::Rewire {
        return Ok(out);
    }
    let ac = adaptive_config(cfg);
    let terms = width_terms(&teacher.config, &out.rewired.config, &a.widths)?;
    out.initial_width_losses = evaluate_terms(teacher, &out.rewired, &terms, &data.dev, &ac)?;
    let width_run = train_adaptive_width(teacher, out.rewired.clone(), &a.widths, &data.train, &ac)?;
    if phase == Phase::Full {
        let teacher_w = width_run.student.clone();
        out.full_run = Some(train_adaptive_full(
            &teacher_w,
            teacher_w.clone(),
            &a.widths,
            &a.depths,
            &data.train,
            &ac,
        )?);
    }
    out.width_run = Some(width_run);
    Ok(out)
}
