use crate::error::{Error, Result};

/// Bounds on an averaged query from per-`x` bounds `(weight, lo, hi)`.
pub fn average_bounds(per_x: &[(f64, f64, f64)]) -> Result<(f64, f64)> {
    if per_x.is_empty() {
        return Err(Error::config("average_bounds needs at least one point"));
    }
    if per_x.iter().any(|(w, _, _)| !(*w >= 0.0)) {
        return Err(Error::config("weights must be nonnegative"));
    }
    let total: f64 = per_x.iter().map(|(w, _, _)| w).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("weights sum to {total}, expected 1")));
    }
    let lo = per_x.iter().map(|(w, l, _)| w * l).sum();
    let hi = per_x.iter().map(|(w, _, h)| w * h).sum();
    Ok((lo, hi))
}

/// Bounds on `Q(a1) - Q(a2)` from per-arm bounds `(lo, hi)`.
pub fn difference_bounds(arm1: (f64, f64), arm2: (f64, f64)) -> (f64, f64) {
    (arm1.0 - arm2.1, arm1.1 - arm2.0)
}
