use crate::error::{Error, Result};

/// Agreement demanded between the order-statistic integral and the mean.
const IDENTITY_TOL: f64 = 1e-9;

/// Success: area under `τ ↦ mean(iou > τ)` for `τ ∈ [0, 1]`, times 100.
///
/// The step function is integrated exactly over the sorted values and
/// checked against the closed form `100 · mean(iou)`.
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::InvalidArgument("success of an empty list".into()));
    }
    if let Some(v) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("IoU {v} outside [0, 1]")));
    }
    let integral = step_integral(ious, 1.0);
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    if (integral - mean).abs() > IDENTITY_TOL {
        return Err(Error::NonFinite(format!("success integral {integral} disagrees with mean {mean}")));
    }
    Ok(100.0 * integral)
}

/// Precision: area under `τ ↦ mean(err < τ)` for `τ ∈ [0, 2]` meters,
/// divided by 2, times 100.
pub fn precision_auc(errs: &[f64]) -> Result<f64> {
    if errs.is_empty() {
        return Err(Error::InvalidArgument("precision of an empty list".into()));
    }
    if let Some(v) = errs.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("center error {v} is not a finite non-negative distance")));
    }
    // mean(err < τ) = 1 - mean(err ≥ τ); the latter integrates like success.
    let above = step_integral(errs, 2.0);
    Ok(100.0 * (2.0 - above) / 2.0)
}

/// `∫₀^hi mean(v > τ) dτ` (equivalently `≥`; the sets differ on measure
/// zero) from the sorted values.
fn step_integral(values: &[f64], hi: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| x.min(hi)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut prev = 0.0;
    let mut area = 0.0;
    for (k, &x) in v.iter().enumerate() {
        area += (x - prev) * (v.len() - k) as f64 / n;
        prev = x;
    }
    area
}
