use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};

use super::rho::{constraint_from_mixed_log_ratios, floored_log_ratio};
use super::spec::SensitivitySpec;
use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::flow::{std_normal_log_density, ConditionalFlow, Conditioned};

/// Latent draws `u~_j ~ N(0, I)` and mixing indicators `xi_j ~ Bernoulli(pi)`
/// for one `(x, a)` unit.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentShiftSample {
    pub u: Vec<Vec<f64>>,
    pub xi: Vec<bool>,
    pub pi_mix: f64,
}

impl LatentShiftSample {
    /// `pi_mix = 0` (continuous treatment) gives `xi == false` everywhere.
    pub fn draw<R: Rng>(k: usize, d_y: usize, pi_mix: f64, rng: &mut R) -> Result<Self> {
        let coin = Bernoulli::new(pi_mix)
            .map_err(|_| Error::Positivity(format!("mixing probability {pi_mix} outside [0, 1]")))?;
        let mut u = Vec::with_capacity(k);
        let mut xi = Vec::with_capacity(k);
        for _ in 0..k {
            u.push((0..d_y).map(|_| StandardNormal.sample(rng)).collect());
            xi.push(coin.sample(rng));
        }
        Ok(LatentShiftSample { u, xi, pi_mix })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// `log p~(u) - log N(u)` at a fixed latent point, where `p~` is the
/// push-forward density of the second-stage flow. Returns the log ratio and
/// the pre-image `f~^{-1}(u)`.
pub fn shift_log_ratio<T: Real>(stage2: &Conditioned<'_, T>, u: &[f64]) -> (T, Vec<T>) {
    let uv: Vec<T> = u.iter().map(|&v| T::cst(v)).collect();
    let (z, logdet) = stage2.inverse(&uv);
    let log_shifted = std_normal_log_density(&z) + logdet;
    (floored_log_ratio(log_shifted, T::cst(std_normal_log_density(u))), z)
}

/// Log ratio at a draw from the shifted component itself: `z ~ N(0, I)`
/// pushed forward through the second-stage flow. Returns the log ratio and
/// the latent point `f~(z)`.
pub fn shifted_draw_log_ratio<T: Real>(stage2: &Conditioned<'_, T>, z: &[f64]) -> (T, Vec<T>) {
    let zv: Vec<T> = z.iter().map(|&v| T::cst(v)).collect();
    let (u, logdet) = stage2.forward(&zv);
    let log_shifted = T::cst(std_normal_log_density(z)) - logdet;
    (floored_log_ratio(log_shifted, std_normal_log_density(&u)), u)
}

/// Monte-Carlo estimate of the sensitivity constraint `D(x, a)` for a
/// second-stage flow conditioned on `ctx`. Each draw is used twice: as a
/// base point and, pushed through the flow, as a draw from the shifted
/// component.
pub fn constraint_estimate(
    spec: &SensitivitySpec,
    stage2: &ConditionalFlow,
    ctx: &[f64],
    sample: &LatentShiftSample,
) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::config("latent sample is empty"));
    }
    let cond = stage2.condition(ctx)?;
    let base: Vec<f64> = sample.u.iter().map(|u| shift_log_ratio(&cond, u).0).collect();
    let shifted: Vec<f64> = sample.u.iter().map(|z| shifted_draw_log_ratio(&cond, z).0).collect();
    constraint_from_mixed_log_ratios(spec, &base, &shifted, sample.pi_mix)
}
