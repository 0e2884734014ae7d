use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Compares an analytic gradient against central differences
/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε`, coordinate by coordinate.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    if x.len() != analytic.len() {
        return Err(Error::shape("finite_diff_check", x.len(), analytic.len()));
    }
    let mut probe = x.to_vec();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > out.max_rel_error || err.is_nan() {
            out = GradCheck {
                max_rel_error: err,
                worst_index: i,
            };
        }
    }
    Ok(out)
}
