use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta as BetaSampler, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous};

use super::{continuous_models, Dgp, LatentDensities};
use crate::data::{Dataset, TreatmentKind};
use crate::error::{Error, Result};
use crate::observational::Propensity;
use crate::sensitivity::SensitivityKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuousDgpConfig {
    pub n: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for ContinuousDgpConfig {
    fn default() -> Self {
        ContinuousDgpConfig {
            n: 10_000,
            gamma: 2.0,
            seed: 0,
        }
    }
}

/// `X ~ U[-1, 1]`, `U ~ Bernoulli(1/2)`, `A | x, u ~ Beta(c, c)` with
/// `c = 2 + x + gamma (u - 1/2)`.
#[derive(Clone, Debug)]
pub struct ContinuousDgp {
    pub gamma: f64,
}

impl ContinuousDgp {
    pub fn new(gamma: f64) -> Result<ContinuousDgp> {
        // Smallest shape over the covariate range is 1 - gamma/2, reached at x = -1.
        if !(0.0..=2.0).contains(&gamma) {
            return Err(Error::config(format!(
                "confounding strength {gamma} makes the Beta shape nonpositive; need 0 <= gamma <= 2"
            )));
        }
        Ok(ContinuousDgp { gamma })
    }

    pub fn shape(&self, x: f64, u: f64) -> f64 {
        2.0 + x + self.gamma * (u - 0.5)
    }

    fn treatment_density(&self, x: f64, u: f64, a: f64) -> f64 {
        let c = self.shape(x, u);
        if c <= 0.0 {
            return 0.0;
        }
        Beta::new(c, c).map(|b| b.pdf(a)).unwrap_or(0.0)
    }

    pub fn outcome_mean(x: f64, a: f64, u: f64) -> f64 {
        a + x * (-x * a).exp() - 0.5 * (u - 0.5) * x + (0.5 * x + 1.0)
    }
}

impl Propensity for ContinuousDgp {
    fn kind(&self) -> TreatmentKind {
        TreatmentKind::Continuous
    }

    fn prob(&self, x: &[f64], a: f64) -> f64 {
        0.5 * (self.treatment_density(x[0], 0.0, a) + self.treatment_density(x[0], 1.0, a))
    }
}

impl Dgp for ContinuousDgp {
    fn name(&self) -> &'static str {
        "continuous"
    }

    fn d_x(&self) -> usize {
        1
    }

    fn d_y(&self) -> usize {
        1
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 1));
        let mut y = Array2::zeros((n, 1));
        let mut a = Vec::with_capacity(n);
        for i in 0..n {
            let (xi, u) = loop {
                let xi: f64 = rng.random_range(-1.0..1.0);
                let u = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                if self.shape(xi, u) > 0.0 {
                    break (xi, u);
                }
            };
            let c = self.shape(xi, u);
            let ai = BetaSampler::new(c, c)
                .map_err(|e| Error::config(format!("Beta({c}, {c}): {e}")))?
                .sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            x[[i, 0]] = xi;
            a.push(ai);
            y[[i, 0]] = Self::outcome_mean(xi, ai, u) + e;
        }
        Dataset::new(x, a, y)
    }

    fn truth(&self, x: &[f64], a: f64) -> Vec<f64> {
        vec![0.5 * (Self::outcome_mean(x[0], a, 0.0) + Self::outcome_mean(x[0], a, 1.0))]
    }

    /// Exact Bayes posterior of `U` given the treatment density.
    fn latent(&self, x: &[f64], a: f64) -> Result<LatentDensities> {
        let d0 = self.treatment_density(x[0], 0.0, a);
        let d1 = self.treatment_density(x[0], 1.0, a);
        let z = d0 + d1;
        if !(z > 0.0) {
            return Err(Error::Positivity(format!(
                "treatment density vanishes at x={}, a={a}",
                x[0]
            )));
        }
        Ok(LatentDensities {
            weights: vec![1.0, 1.0],
            p_u_x: vec![0.5, 0.5],
            p_u_xa: vec![d0 / z, d1 / z],
            p_a_x: None,
        })
    }

    fn models(&self) -> Vec<SensitivityKind> {
        continuous_models()
    }
}
