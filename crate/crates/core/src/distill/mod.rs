//! Contextual knowledge distillation objectives.
//!
//! The combined loss is `L = L_logit + λ_CKD · (L_WR + L_LTR)` where
//! `L_WR = pair + λ_WR · triple` over word relations inside each aligned
//! layer, and `L_LTR = pair + λ_LTR · triple` over each word's trajectory
//! across aligned layers. Every relation sum is a mean over its unmasked
//! terms.

mod align;
mod logit;
mod ltr;
mod matching;
mod relation_match;
mod wr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

pub use align::{align_layers, gcd, LayerAlignment};
pub use logit::{logit_kd_loss, LogitLoss};
pub use ltr::ckd_ltr_loss;
pub use matching::{match_loss, MatchKind};
pub use wr::ckd_wr_loss;


pub(crate) use logit::log_softmax;

use crate::error::{invalid, usage, Result};
use crate::model::{backward, LayerStates, ParamSet, StateGrads};
use crate::relations::PairKind;

/// Scalar hyperparameters of the distillation objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda_wr: f64,
    pub lambda_ltr: f64,
    pub lambda_ckd: f64,
    /// Weight of the soft (teacher) term against the hard-label term.
    pub alpha: f64,
    pub temperature: f64,
    /// Locality window δ for word relations.
    pub delta: usize,
    pub match_kind: MatchKind,
    pub pair_kind: PairKind,
    /// Apply the δ window to WR pair terms as well as triples.
    pub window_pairs: bool,
    /// Ablation switches.
    pub use_wr: bool,
    pub use_ltr: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_wr: 10.0,
            lambda_ltr: 10.0,
            lambda_ckd: 100.0,
            alpha: 0.9,
            temperature: 4.0,
            delta: 16,
            match_kind: MatchKind::Huber,
            pair_kind: PairKind::L2,
            window_pairs: true,
            use_wr: true,
            use_ltr: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_wr", self.lambda_wr),
            ("lambda_ltr", self.lambda_ltr),
            ("lambda_ckd", self.lambda_ckd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return invalid(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }
}

/// One CKD loss term with its student-side gradients.
#[derive(Debug, Clone, Default)]
pub struct CkdTerm {
    pub pair: f64,
    pub triple: f64,
    /// `pair + λ · triple`.
    pub weighted: f64,
    /// Gradient of `weighted` with respect to student representations.
    pub grads: StateGrads,
}

pub(crate) fn check_pair(
    student: &LayerStates,
    teacher: &LayerStates,
    alignment: &LayerAlignment,
) -> Result<()> {
    wr::check_masks(student, teacher)?;
    for &(s, t) in &alignment.pairs {
        if s >= student.reps.len() || t >= teacher.reps.len() {
            return usage(format!(
                "alignment pair ({s}, {t}) outside student depth {} / teacher depth {}",
                student.depth(),
                teacher.depth()
            ));
        }
    }
    Ok(())
}

/// Per-step loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_total")]
    pub total: f64,
    #[serde(rename = "L_logit")]
    pub logit: f64,
    #[serde(rename = "L_WR_pair")]
    pub wr_pair: f64,
    #[serde(rename = "L_WR_triple")]
    pub wr_triple: f64,
    #[serde(rename = "L_LTR_pair")]
    pub ltr_pair: f64,
    #[serde(rename = "L_LTR_triple")]
    pub ltr_triple: f64,
}

impl LossBreakdown {
    pub fn wr(&self, config: &DistillConfig) -> f64 {
        self.wr_pair + config.lambda_wr * self.wr_triple
    }

    pub fn ltr(&self, config: &DistillConfig) -> f64 {
        self.ltr_pair + config.lambda_ltr * self.ltr_triple
    }

    /// `L_logit + λ_CKD · (L_WR + L_LTR)` recomputed from the components.
    pub fn recombine(&self, config: &DistillConfig) -> f64 {
        self.logit + config.lambda_ckd * (self.wr(config) + self.ltr(config))
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.total += s * other.total;
        self.logit += s * other.logit;
        self.wr_pair += s * other.wr_pair;
        self.wr_triple += s * other.wr_triple;
        self.ltr_pair += s * other.ltr_pair;
        self.ltr_triple += s * other.ltr_triple;
    }
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub breakdown: LossBreakdown,
    /// Gradient of `breakdown.total` with respect to the student states.
    pub grads: StateGrads,
}

/// `L_logit + λ_CKD · (L_LTR + L_WR)` with gradients on the student states.
///
/// With `λ_CKD = 0` (or both CKD terms switched off) the relation terms are
/// not evaluated, so the result is exactly the logit loss.
pub fn total_objective(
    student: &LayerStates,
    teacher: &LayerStates,
    label: usize,
    alignment: &LayerAlignment,
    config: &DistillConfig,
) -> Result<Objective> {
    config.validate()?;
    check_pair(student, teacher, alignment)?;
    let logit = logit_kd_loss(
        &student.logits,
        &teacher.logits,
        label,
        config.alpha,
        config.temperature,
    )?;
    let mut breakdown = LossBreakdown {
        logit: logit.loss,
        ..Default::default()
    };
    let mut grads = StateGrads::new();
    grads.add_logits(logit.grad);
    let mut ckd = 0.0;
    if config.lambda_ckd != 0.0 {
        if config.use_wr {
            let wr = ckd_wr_loss(student, teacher, alignment, config)?;
            breakdown.wr_pair = wr.pair;
            breakdown.wr_triple = wr.triple;
            ckd += wr.weighted;
            grads.merge_scaled(wr.grads, config.lambda_ckd);
        }
        if config.use_ltr {
            let ltr = ckd_ltr_loss(student, teacher, alignment, config)?;
            breakdown.ltr_pair = ltr.pair;
            breakdown.ltr_triple = ltr.triple;
            ckd += ltr.weighted;
            grads.merge_scaled(ltr.grads, config.lambda_ckd);
        }
    }
    breakdown.total = if ckd == 0.0 {
        logit.loss
    } else {
        logit.loss + config.lambda_ckd * ckd
    };
    Ok(Objective { breakdown, grads })
}

/// [`total_objective`] followed by the student backward pass.
pub fn total_objective_param_grads(
    student_params: &ParamSet,
    student: &LayerStates,
    teacher: &LayerStates,
    label: usize,
    alignment: &LayerAlignment,
    config: &DistillConfig,
) -> Result<(LossBreakdown, ParamSet)> {
    let obj = total_objective(student, teacher, label, alignment, config)?;
    let g = backward(student_params, student, &obj.grads)?;
    Ok((obj.breakdown, g.params))
}

/// Softmax of `z / T`.
pub fn soften(z: &Array1<f64>, temperature: f64) -> Array1<f64> {
    log_softmax(&(z / temperature)).mapv(f64::exp)
}
