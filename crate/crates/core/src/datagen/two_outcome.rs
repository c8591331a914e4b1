use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{binary_models, BinaryMsmDgp, Dgp, LatentDensities};
use crate::data::{Dataset, TreatmentKind};
use crate::error::Result;
use crate::observational::Propensity;
use crate::sensitivity::SensitivityKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoOutcomeDgpConfig {
    pub n: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TwoOutcomeDgpConfig {
    fn default() -> Self {
        TwoOutcomeDgpConfig {
            n: 5_000,
            gamma: 2.0,
            seed: 0,
        }
    }
}

/// The binary MSM treatment mechanism with two correlated Gaussian
/// outcomes that both load on the confounder.
#[derive(Clone, Debug)]
pub struct TwoOutcomeDgp {
    pub base: BinaryMsmDgp,
}

impl TwoOutcomeDgp {
    pub fn new(gamma: f64) -> Result<TwoOutcomeDgp> {
        Ok(TwoOutcomeDgp {
            base: BinaryMsmDgp::new(gamma)?,
        })
    }

    pub fn outcome_mean(x: f64, a: f64, u: f64) -> [f64; 2] {
        let s = 2.0 * a - 1.0;
        let c = 2.0 * u - 1.0;
        [0.5 * s + 0.5 * x + 0.5 * c, -0.3 * s + 0.3 * x + 0.5 * c]
    }
}

impl Propensity for TwoOutcomeDgp {
    fn kind(&self) -> TreatmentKind {
        TreatmentKind::Binary
    }

    fn prob(&self, x: &[f64], a: f64) -> f64 {
        self.base.prob(x, a)
    }
}

impl Dgp for TwoOutcomeDgp {
    fn name(&self) -> &'static str {
        "two_outcome"
    }

    fn d_x(&self) -> usize {
        1
    }

    fn d_y(&self) -> usize {
        2
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 1));
        let mut y = Array2::zeros((n, 2));
        let mut a = Vec::with_capacity(n);
        for i in 0..n {
            let xi: f64 = rng.random_range(-1.0..1.0);
            let u = if rng.random::<f64>() < self.base.p_u1(xi) {
                1.0
            } else {
                0.0
            };
            let ai = if rng.random::<f64>() < self.base.full_propensity(xi, u) {
                1.0
            } else {
                0.0
            };
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e2: f64 = StandardNormal.sample(&mut rng);
            let m = Self::outcome_mean(xi, ai, u);
            x[[i, 0]] = xi;
            a.push(ai);
            y[[i, 0]] = m[0] + 0.6 * e1;
            y[[i, 1]] = m[1] + 0.3 * e1 + 0.5 * e2;
        }
        Dataset::new(x, a, y)
    }

    fn truth(&self, x: &[f64], a: f64) -> Vec<f64> {
        let p1 = self.base.p_u1(x[0]);
        let m1 = Self::outcome_mean(x[0], a, 1.0);
        let m0 = Self::outcome_mean(x[0], a, 0.0);
        vec![p1 * m1[0] + (1.0 - p1) * m0[0], p1 * m1[1] + (1.0 - p1) * m0[1]]
    }

    fn latent(&self, x: &[f64], a: f64) -> Result<LatentDensities> {
        self.base.latent(x, a)
    }

    fn models(&self) -> Vec<SensitivityKind> {
        binary_models()
    }
}
