//! Central finite-difference gradient checking (64-bit).

use crate::error::{Error, Result};

/// Compares `analytic(point)` against central differences of `value` and
/// returns `max_i |analytic_i - fd_i| / max(1, |fd_i|)`.
pub fn gradient_check<F, G>(value: F, analytic: G, point: &[f64], epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidInput(format!("gradient_check: epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let grad = analytic(point);
    if grad.len() != point.len() {
        return Err(Error::shape("gradient_check", format!("{} partials", point.len()), grad.len()));
    }
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let fd = finite_difference(&value, &mut probe, i, epsilon);
        if !fd.is_finite() || !grad[i].is_finite() {
            return Err(Error::NonFinite { location: format!("parameter {i}") });
        }
        worst = worst.max((grad[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

/// Central difference of `value` along coordinate `i`; restores `probe[i]`.
pub fn finite_difference<F: Fn(&[f64]) -> f64>(value: &F, probe: &mut [f64], i: usize, epsilon: f64) -> f64 {
    let orig = probe[i];
    probe[i] = orig + epsilon;
    let plus = value(probe);
    probe[i] = orig - epsilon;
    let minus = value(probe);
    probe[i] = orig;
    (plus - minus) / (2.0 * epsilon)
}
