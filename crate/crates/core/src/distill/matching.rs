use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise discrepancy between student and teacher statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    L1,
    /// Squared error.
    L2,
    /// Huber with threshold 1.
    #[default]
    Huber,
}

impl std::str::FromStr for MatchKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "huber" => Ok(Self::Huber),
            _ => Err(format!("unknown match kind {s:?} (l1|l2|huber)")),
        }
    }
}

const HUBER_DELTA: f64 = 1.0;

impl MatchKind {
    /// Discrepancy of one element, as a function of `student − teacher`.
    pub fn value(self, diff: f64) -> f64 {
        match self {
            MatchKind::L1 => diff.abs(),
            MatchKind::L2 => diff * diff,
            MatchKind::Huber => {
                let a = diff.abs();
                if a <= HUBER_DELTA {
                    0.5 * diff * diff
                } else {
                    HUBER_DELTA * (a - 0.5 * HUBER_DELTA)
                }
            }
        }
    }

    /// Derivative of [`MatchKind::value`] with respect to `diff`.
    pub fn grad(self, diff: f64) -> f64 {
        match self {
            MatchKind::L1 => {
                if diff == 0.0 {
                    0.0
                } else {
                    diff.signum()
                }
            }
            MatchKind::L2 => 2.0 * diff,
            MatchKind::Huber => diff.clamp(-HUBER_DELTA, HUBER_DELTA),
        }
    }
}

/// Mean elementwise discrepancy between `student` and `teacher`.
pub fn match_loss(student: &[f64], teacher: &[f64], kind: MatchKind) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::Usage(format!(
            "match_loss shapes differ: {} vs {}",
            student.len(),
            teacher.len()
        )));
    }
    if student.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| kind.value(s - t))
        .sum();
    Ok(sum / student.len() as f64)
}
