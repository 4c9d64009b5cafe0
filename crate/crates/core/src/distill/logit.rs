use ndarray::Array1;

use crate::error::{invalid, usage, Result};

#[derive(Debug, Clone)]
pub struct LogitLoss {
    pub loss: f64,
    /// Soft cross-entropy between temperature-softened distributions.
    pub soft: f64,
    /// Cross-entropy against the hard label.
    pub hard: f64,
    /// Gradient with respect to the student logits.
    pub grad: Array1<f64>,
}

pub(crate) fn log_softmax(z: &Array1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = z.mapv(|v| (v - max).exp()).sum().ln() + max;
    z.mapv(|v| v - lse)
}

/// `α·T²·SCE(softmax(z_t/T), softmax(z_s/T)) + (1−α)·CE(z_s, label)`.
pub fn logit_kd_loss(
    student: &Array1<f64>,
    teacher: &Array1<f64>,
    label: usize,
    alpha: f64,
    temperature: f64,
) -> Result<LogitLoss> {
    if student.len() != teacher.len() {
        return usage(format!(
            "student has {} classes, teacher {}",
            student.len(),
            teacher.len()
        ));
    }
    if label >= student.len() {
        return invalid(format!("label {label} out of range for {} classes", student.len()));
    }
    let t = temperature;
    let log_ps = log_softmax(&(student / t));
    let log_pt = log_softmax(&(teacher / t));
    let pt = log_pt.mapv(f64::exp);
    let ps = log_ps.mapv(f64::exp);
    let soft = -(&pt * &log_ps).sum();

    let log_p = log_softmax(student);
    let hard = -log_p[label];
    let mut onehot = Array1::zeros(student.len());
    onehot[label] = 1.0;

    let loss = alpha * t * t * soft + (1.0 - alpha) * hard;
    let grad = (&ps - &pt) * (alpha * t) + (log_p.mapv(f64::exp) - onehot) * (1.0 - alpha);
    Ok(LogitLoss {
        loss,
        soft,
        hard,
        grad,
    })
}
