use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensitivity::SensitivityKind;

/// Latent posteriors on a set of points. Sums `sum_i w_i g(u_i)` stand in
/// for integrals over `u` (all weights 1 for a discrete `U`); points with
/// zero weight only enter suprema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDensities {
    pub weights: Vec<f64>,
    pub p_u_x: Vec<f64>,
    pub p_u_xa: Vec<f64>,
    /// `P(a | x)` for binary treatments; `None` for continuous ones, where
    /// the mixing offset vanishes.
    pub p_a_x: Option<f64>,
}

impl LatentDensities {
    fn rho(&self, offset: f64) -> Vec<f64> {
        self.p_u_x
            .iter()
            .zip(&self.p_u_xa)
            .map(|(&px, &pxa)| {
                if pxa > 0.0 {
                    (px / pxa - offset) / (1.0 - offset)
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }
}

/// Smallest sensitivity parameter whose constraint holds for the given
/// generative posteriors. May be infinite.
pub fn oracle_gamma(lat: &LatentDensities, kind: SensitivityKind) -> Result<f64> {
    let offset = match (kind, lat.p_a_x) {
        (SensitivityKind::Cmsm, _) | (_, None) => 0.0,
        (SensitivityKind::WeightedMsm, _) => {
            return Err(Error::config("oracle parameters are not defined for the weighted MSM"))
        }
        (_, Some(p)) => {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Positivity(format!("P(a|x) = {p}")));
            }
            p
        }
    };
    let rho = lat.rho(offset);
    if rho.iter().any(|r| r.is_nan() || *r < 0.0) {
        return Err(Error::Positivity(
            "latent posterior inconsistent with the propensity".into(),
        ));
    }
    let hi = rho.iter().copied().fold(0.0, f64::max);
    let lo = rho.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(match kind {
        SensitivityKind::Msm | SensitivityKind::Cmsm | SensitivityKind::WeightedMsm => hi.max(1.0 / lo),
        SensitivityKind::Rosenbaum => hi / lo,
        SensitivityKind::F(f) => {
            // Continuous extension at zero (0 ln 0 = 0).
            let g = |r: f64| if r == 0.0 { f.eval(f64::MIN_POSITIVE) } else { f.eval(r) };
            let mut fwd = 0.0;
            let mut rev = 0.0;
            for ((&w, &pxa), &r) in lat.weights.iter().zip(&lat.p_u_xa).zip(&rho) {
                if w > 0.0 && pxa > 0.0 {
                    fwd += w * pxa * g(r);
                    rev += w * pxa * g(1.0 / r);
                }
            }
            fwd.max(rev)
        }
    })
}
