//! Sharp MSM bound on `E[Y | do(a), x]` by step-function reweighting of the
//! first-stage density, integrated on a grid in outcome space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observational::Stage1Model;
use crate::query::Direction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureConfig {
    pub points: usize,
    /// The grid spans `f*(-r)` to `f*(r)` in outcome space.
    pub latent_radius: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            points: 4001,
            latent_radius: 8.0,
        }
    }
}

/// Likelihood-ratio levels `(l, h)` and the cutoff quantile.
pub fn msm_weights(gamma: f64, pi: f64, direction: Direction) -> (f64, f64, f64) {
    let lo = (1.0 - pi) / gamma + pi;
    let hi = gamma * (1.0 - pi) + pi;
    match direction {
        Direction::Upper => (lo, hi, gamma / (1.0 + gamma)),
        Direction::Lower => (hi, lo, 1.0 / (1.0 + gamma)),
    }
}

/// Reweighted mean of a density tabulated on an increasing grid: weight
/// `below` where the CDF is under `tau`, `above` elsewhere. The grid cell
/// containing the cutoff is split at the interpolated crossing point.
pub fn step_reweighted_mean(ys: &[f64], dens: &[f64], below: f64, above: f64, tau: f64) -> Result<f64> {
    let n = ys.len();
    let mut cdf = vec![0.0; n];
    for i in 1..n {
        cdf[i] = cdf[i - 1] + 0.5 * (ys[i] - ys[i - 1]) * (dens[i] + dens[i - 1]);
    }
    let mass = cdf[n - 1];
    if !(0.99..=1.01).contains(&mass) {
        return Err(Error::Quadrature { mass });
    }
    let cut = tau * mass;
    let mut acc = 0.0;
    for i in 1..n {
        let (y0, y1, p0, p1) = (ys[i - 1], ys[i], dens[i - 1], dens[i]);
        let piece = |a: f64, b: f64, pa: f64, pb: f64| 0.5 * (b - a) * (a * pa + b * pb);
        if cdf[i] <= cut {
            acc += below * piece(y0, y1, p0, p1);
        } else if cdf[i - 1] >= cut {
            acc += above * piece(y0, y1, p0, p1);
        } else {
            let t = (cut - cdf[i - 1]) / (cdf[i] - cdf[i - 1]);
            let yc = y0 + t * (y1 - y0);
            let pc = p0 + t * (p1 - p0);
            acc += below * piece(y0, yc, p0, pc) + above * piece(yc, y1, pc, p1);
        }
    }
    Ok(acc / mass)
}

/// Sharp MSM bound for a one-dimensional outcome. `pi` is `P(A = a | x)`
/// for binary treatments and `0` for continuous ones.
pub fn closed_form_msm_bound(
    stage1: &Stage1Model,
    x: &[f64],
    a: f64,
    gamma: f64,
    pi: f64,
    direction: Direction,
    quad: &QuadratureConfig,
) -> Result<f64> {
    if stage1.d_y() != 1 {
        return Err(Error::config("closed-form MSM bound needs a one-dimensional outcome"));
    }
    if gamma < 1.0 || !gamma.is_finite() {
        return Err(Error::config(format!("gamma = {gamma} must be >= 1")));
    }
    if !(0.0..1.0).contains(&pi) {
        return Err(Error::Positivity(format!("propensity {pi} outside [0, 1)")));
    }
    if quad.points < 3 {
        return Err(Error::config("quadrature needs at least 3 points"));
    }
    let lo = stage1.push(&[-quad.latent_radius], x, a)?[0];
    let hi = stage1.push(&[quad.latent_radius], x, a)?[0];
    let ys = crate::stats::linspace(lo, hi, quad.points);
    let dens = ys
        .iter()
        .map(|&y| stage1.log_prob(&[y], x, a).map(f64::exp))
        .collect::<Result<Vec<f64>>>()?;
    let (below, above, tau) = msm_weights(gamma, pi, direction);
    step_reweighted_mean(&ys, &dens, below, above, tau)
}
