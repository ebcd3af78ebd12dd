//! Central finite-difference gradient checker.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Draws whose objective reports a kink closer than this are skipped.
    pub kink_margin: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            kink_margin: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `‖analytic - numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`; 0 when both vanish.
    pub relative_error: f64,
    /// Largest per-coordinate absolute difference.
    pub max_abs_error: f64,
    pub passed: bool,
}

/// `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂)`, defined as 0 when both vectors are (numerically) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `params`.
pub fn numeric_gradient(params: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let plus = f(&theta)?;
        theta[i] = orig - step;
        let minus = f(&theta)?;
        theta[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    if out.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("finite-difference gradient".into()));
    }
    Ok(out)
}

/// Compares an analytic gradient with central differences of `f`.
pub fn check_gradient(
    params: &[f64],
    analytic: &[f64],
    f: impl FnMut(&[f64]) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let numeric = numeric_gradient(params, cfg.step, f)?;
    let rel = relative_error(analytic, &numeric);
    let max_abs = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        relative_error: rel,
        max_abs_error: max_abs,
        passed: rel <= cfg.tolerance,
    })
}
