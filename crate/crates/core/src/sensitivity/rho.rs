//! Density-ratio functions `rho` and the Monte-Carlo constraint estimators
//! built on them.

use super::spec::{SensitivityKind, SensitivitySpec};
use crate::autodiff::Real;
use crate::error::{Error, Result};

pub const DENSITY_FLOOR: f64 = 1e-12;

fn check_pi(pi: f64) -> Result<()> {
    if pi <= 0.0 || pi >= 1.0 || !pi.is_finite() {
        return Err(Error::Positivity(format!("propensity {pi} outside (0, 1)")));
    }
    Ok(())
}

/// `rho(x, u, a) = (P(u|x) / P(u|x,a) - pi) / (1 - pi)`.
pub fn rho_pointwise(p_u_x: f64, p_u_xa: f64, pi: f64) -> Result<f64> {
    check_pi(pi)?;
    let ratio = p_u_x.max(DENSITY_FLOOR) / p_u_xa.max(DENSITY_FLOOR);
    Ok((ratio - pi) / (1.0 - pi))
}

/// Pairwise ratio for Rosenbaum's model, written exactly in terms of the
/// four densities `P(u_i | x)` and `P(u_i | x, a)`.
pub fn rho_pairwise(p1_x: f64, p1_xa: f64, p2_x: f64, p2_xa: f64, pi: f64) -> Result<f64> {
    check_pi(pi)?;
    let (p1_x, p1_xa) = (p1_x.max(DENSITY_FLOOR), p1_xa.max(DENSITY_FLOOR));
    let (p2_x, p2_xa) = (p2_x.max(DENSITY_FLOOR), p2_xa.max(DENSITY_FLOOR));
    let num = p1_xa * p2_x - p1_xa * p2_xa * pi;
    let den = p2_xa * p1_x - p1_xa * p2_xa * pi;
    Ok(num / den)
}

/// Per-sample `rho` values given `log p~(u_j) - log N(u_j)`, the log ratio
/// of the shifted component to the base density at each latent draw.
///
/// `pi_mix` is the mixing weight of the unshifted component (the observed
/// propensity of the arm, zero for continuous treatments); `offset` is
/// [`SensitivitySpec::rho_offset`].
pub fn rho_from_log_ratios<T: Real>(log_ratio: &[T], pi_mix: f64, offset: f64) -> Result<Vec<T>> {
    log_ratio
        .iter()
        .enumerate()
        .map(|(j, &lr)| {
            let mixed = lr.exp() * (1.0 - pi_mix) + pi_mix;
            let rho = (mixed - offset) / (1.0 - offset);
            if rho.val() > 0.0 && rho.val().is_finite() {
                Ok(rho)
            } else {
                Err(Error::DegenerateDensity {
                    index: j,
                    value: rho.val(),
                })
            }
        })
        .collect()
}

/// `log p~(u) - log N(u)` with both densities floored at [`DENSITY_FLOOR`].
pub fn floored_log_ratio<T: Real>(log_shifted: T, log_base: T) -> T {
    let floor = T::cst(DENSITY_FLOOR.ln());
    log_shifted.max_of(floor) - log_base.max_of(floor)
}

fn extremes<T: Real>(rho: &[T]) -> (T, T) {
    let mut lo = rho[0];
    let mut hi = rho[0];
    for &r in &rho[1..] {
        lo = lo.min_of(r);
        hi = hi.max_of(r);
    }
    (lo, hi)
}

/// Constraint value `D(x, a)` from per-sample `rho` values.
///
/// Supremum models use a hard max, so the gradient reaches only the extreme
/// samples. For Rosenbaum's model the pairwise ratio factorises as
/// `rho(u_2) / rho(u_1)`, so the maximum over all `k^2` ordered pairs is
/// `max rho / min rho`.
pub fn constraint_from_rho<T: Real>(kind: SensitivityKind, rho: &[T]) -> T {
    assert!(!rho.is_empty(), "constraint estimate needs at least one sample");
    match kind {
        SensitivityKind::Msm | SensitivityKind::Cmsm | SensitivityKind::WeightedMsm => {
            let (lo, hi) = extremes(rho);
            hi.max_of(lo.recip())
        }
        SensitivityKind::Rosenbaum => {
            let (lo, hi) = extremes(rho);
            hi / lo
        }
        SensitivityKind::F(f) => {
            let fwd: Vec<T> = rho.iter().map(|&r| f.eval(r)).collect();
            let rev: Vec<T> = rho.iter().map(|&r| f.eval(r.recip())).collect();
            let k = rho.len() as f64;
            (T::sum(&fwd) / k).max_of(T::sum(&rev) / k)
        }
    }
}

/// `D(x, a)` straight from log ratios at base draws `u ~ N(0, I)`.
pub fn constraint_from_log_ratios<T: Real>(spec: &SensitivitySpec, log_ratio: &[T], pi_mix: f64) -> Result<T> {
    constraint_from_mixed_log_ratios(spec, log_ratio, &[], pi_mix)
}

/// `D(x, a)` from log ratios at base draws and at draws from the shifted
/// component `p~`.
///
/// Base draws alone almost never land where a shift piles mass into the
/// latent tails, so the f-divergence integral is estimated over both sets
/// with balance-heuristic weights `1 / (m_base + m_shifted r)`, `r = p~/N`.
/// This is unbiased for any split and reduces to the plain mean when
/// `shifted` is empty. Supremum models take their extremes over both sets.
pub fn constraint_from_mixed_log_ratios<T: Real>(
    spec: &SensitivitySpec,
    base: &[T],
    shifted: &[T],
    pi_mix: f64,
) -> Result<T> {
    let all: Vec<T> = base.iter().chain(shifted).copied().collect();
    let rho = rho_from_log_ratios(&all, pi_mix, spec.rho_offset(pi_mix)?)?;
    let SensitivityKind::F(f) = spec.kind else {
        return Ok(constraint_from_rho(spec.kind, &rho));
    };
    let (m_base, m_shifted) = (base.len() as f64, shifted.len() as f64);
    let mut fwd = Vec::with_capacity(rho.len());
    let mut rev = Vec::with_capacity(rho.len());
    for (&lr, &r) in all.iter().zip(&rho) {
        let w = (lr.exp() * m_shifted + m_base).recip();
        fwd.push(f.eval(r) * w);
        rev.push(f.eval(r.recip()) * w);
    }
    Ok(T::sum(&fwd).max_of(T::sum(&rev)))
}
