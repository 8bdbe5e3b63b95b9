use super::mlp::ParamSet;
use crate::error::{Error, Result};

/// Central-difference gradient `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut loss: F, params: &ParamSet, h: f64) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step {h} must be positive")));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let plus = loss(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let minus = loss(&probe);
        probe.as_mut_slice()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while probing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(ParamSet::new(grad))
}

/// Largest per-coordinate relative error, with magnitudes below `floor`
/// compared absolutely.
pub fn max_relative_error(analytic: &ParamSet, numeric: &ParamSet, floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
