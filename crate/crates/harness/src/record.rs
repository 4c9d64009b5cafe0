//! Run records, loss streams and CSV output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ckd_core::baselines::ObjectiveKind;
use ckd_core::distill::LossBreakdown;
use ckd_core::model::ParamSet;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;

pub const RUN_SCHEMA: &str = "ckd-run/v1";
pub const STEP_SCHEMA: &str = "ckd-steps/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Teacher,
    Distill,
}

/// Batch-mean losses of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// Auxiliary term of a baseline objective (`L_total = L_logit + λ·L_aux`).
    #[serde(rename = "L_aux", default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    /// `L_total` of the last step, `NaN`-free; 0 when no step was taken.
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: String,
    pub kind: RunKind,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub objective: Option<ObjectiveKind>,
    /// Fingerprint of the teacher parameters a student was distilled from.
    pub teacher_fingerprint: Option<String>,
    pub steps: Vec<StepRecord>,
    pub metrics: Metrics,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One JSON object per step, preceded by a header line naming the schema.
    pub fn write_loss_stream(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", serde_json::json!({ "schema": STEP_SCHEMA }))?;
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a stream written by [`RunRecord::write_loss_stream`].
pub fn read_loss_stream(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap_or("{}"))?;
    if header["schema"] != STEP_SCHEMA {
        return crate::error::config_err(format!("unexpected loss stream header {header}"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// FNV-1a over the bit patterns of every parameter.
pub fn fingerprint(params: &ParamSet) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in params.flatten() {
        for b in x.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
