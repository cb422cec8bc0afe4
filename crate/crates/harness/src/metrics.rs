//! Scalar performance metrics over position errors and run records.

use nln_sim::RunRecord;

use crate::error::{HarnessError, HarnessResult};

/// Root mean square of `errors`.
pub fn rmse(errors: &[f64]) -> HarnessResult<f64> {
    if errors.is_empty() {
        return Err(HarnessError::InvalidArgument("rmse of an empty error set".into()));
    }
    let ms = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
    Ok(ms.sqrt())
}

/// Mean absolute value of `errors`.
pub fn mae(errors: &[f64]) -> HarnessResult<f64> {
    if errors.is_empty() {
        return Err(HarnessError::InvalidArgument("mean of an empty error set".into()));
    }
    Ok(errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len() as f64)
}

/// Localization error outage: for each threshold, the fraction of errors
/// strictly above it. An empty error set has no outage.
pub fn leo(errors: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    thresholds
        .iter()
        .map(|&t| {
            if sorted.is_empty() {
                return (t, 0.0);
            }
            let at_or_below = sorted.partition_point(|&e| e <= t);
            (t, (sorted.len() - at_or_below) as f64 / sorted.len() as f64)
        })
        .collect()
}

/// Smallest threshold whose outage is at most `p_o`.
pub fn error_threshold(errors: &[f64], p_o: f64) -> HarnessResult<f64> {
    if errors.is_empty() {
        return Err(HarnessError::InvalidArgument("error threshold of an empty error set".into()));
    }
    if !(0.0..=1.0).contains(&p_o) {
        return Err(HarnessError::InvalidArgument(format!("outage probability {p_o} outside [0, 1]")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Up to `allowed` errors may exceed the threshold.
    let allowed = ((p_o * n as f64) + 1e-9).floor() as usize;
    if allowed >= n {
        return Ok(0.0);
    }
    Ok(sorted[n - allowed - 1])
}

/// Completed range measurements per second of simulated time.
pub fn measurement_rate(records: &[RunRecord], duration_s: f64) -> HarnessResult<f64> {
    if !(duration_s > 0.0) {
        return Err(HarnessError::InvalidArgument(format!("duration {duration_s} must be positive")));
    }
    let total: u64 = records.iter().map(|r| u64::from(r.n_meas)).sum();
    Ok(total as f64 / duration_s)
}

/// Relative change from `base` to `new`, in percent.
pub fn percent_change(base: f64, new: f64) -> f64 {
    if base == new {
        0.0
    } else if base == 0.0 {
        f64::INFINITY.copysign(new)
    } else {
        (new - base) / base.abs() * 100.0
    }
}

/// `count` evenly spaced thresholds from zero to `max`.
pub fn threshold_grid(max: f64, count: usize) -> Vec<f64> {
    let count = count.max(2);
    (0..count).map(|i| max * i as f64 / (count - 1) as f64).collect()
}
