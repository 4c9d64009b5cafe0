//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::model::ParamSet;

/// Denominator floor for relative error, multiplied by `max(1, |f(x)|)`.
///
/// Central differences carry round-off of order `|f(x)|·u/ε`, so coordinates
/// whose true gradient is zero (e.g. key biases, which softmax ignores) are
/// judged on absolute error relative to the loss scale.
pub const REL_FLOOR: f64 = 1e-5;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Tensor holding the worst coordinate, when checking a [`ParamSet`].
    pub worst_tensor: Option<String>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + ε e_i) − f(x − ε e_i)) / 2ε` for every coordinate.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares gradients using `floor` as the relative-error denominator floor.
pub fn compare(analytic: &[f64], numeric: &[f64], floor: f64) -> GradcheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_tensor: None,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        checked: analytic.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n, floor);
        if e > report.max_rel_error || e.is_nan() {
            report.max_rel_error = e;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    report
}

/// Checks `analytic` against central differences of `f` at `x`.
pub fn gradcheck(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<GradcheckReport> {
    if analytic.len() != x.len() {
        return Err(Error::Usage(format!(
            "{} analytic entries for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    let value = f(x);
    if !value.is_finite() {
        return Err(Error::NonFinite("loss at the base point".into()));
    }
    let numeric = central_difference(&mut f, x, eps)?;
    Ok(compare(analytic, &numeric, REL_FLOOR * value.abs().max(1.0)))
}

/// Checks a parameter gradient over every coordinate of `params`.
pub fn gradcheck_params(
    params: &ParamSet,
    mut loss: impl FnMut(&ParamSet) -> f64,
    analytic: &ParamSet,
    eps: f64,
) -> Result<GradcheckReport> {
    let x = params.flatten();
    let mut probe = params.clone();
    let mut report = gradcheck(
        |v| {
            probe.assign_flat(v);
            loss(&probe)
        },
        &x,
        &analytic.flatten(),
        eps,
    )?;
    let mut off = 0;
    params.for_each_tensor(|name, data, _| {
        if report.worst_tensor.is_none() && report.worst_index < off + data.len() {
            report.worst_tensor = Some(format!("{name}[{}]", report.worst_index - off));
        }
        off += data.len();
    });
    Ok(report)
}
