use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{binary_models, Dgp, LatentDensities};
use crate::data::{Dataset, TreatmentKind};
use crate::error::{Error, Result};
use crate::observational::Propensity;
use crate::sensitivity::SensitivityKind;
use crate::stats::sigmoid;

pub const SYNTHETIC_DIM: usize = 8;
const GAUSSIAN_DIM: usize = 6;
const PROPENSITY_COEF: [f64; SYNTHETIC_DIM] = [0.35, -0.3, 0.25, -0.2, 0.15, -0.1, 0.3, -0.3];
const PROPENSITY_INTERCEPT: f64 = -0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiSyntheticConfig {
    pub n: usize,
    pub gamma: f64,
    pub noise_sd: f64,
    /// Latent grid size for oracle integrals over `u in [0, 1]`.
    pub grid: usize,
    pub seed: u64,
}

impl Default for SemiSyntheticConfig {
    fn default() -> Self {
        SemiSyntheticConfig {
            n: 10_000,
            gamma: 0.25,
            noise_sd: 0.1,
            grid: 2000,
            seed: 0,
        }
    }
}

/// Uniform latent `U`, a treatment weight `w(x, u)` linear in `u` with unit
/// mean, so that `P(A = 1 | x) = pi_hat(x)` exactly, and an outcome linear
/// in the covariates and `U`.
///
/// Covariates are either supplied (rows are resampled) or drawn from a
/// built-in generator: six AR(1)-correlated Gaussians and two binary
/// columns. `pi_hat` is a fixed logistic score of the covariates.
#[derive(Clone, Debug)]
pub struct SemiSyntheticDgp {
    pub config: SemiSyntheticConfig,
    covariates: Option<Array2<f64>>,
    coef: Vec<f64>,
}

impl SemiSyntheticDgp {
    pub fn new(config: SemiSyntheticConfig) -> Result<SemiSyntheticDgp> {
        if !(config.gamma > 0.0 && config.gamma <= 1.0) {
            return Err(Error::config(format!(
                "confounding weight gamma must lie in (0, 1], got {}",
                config.gamma
            )));
        }
        if !(config.noise_sd >= 0.0) || config.grid < 2 {
            return Err(Error::config("noise_sd >= 0 and grid >= 2 required"));
        }
        Ok(SemiSyntheticDgp {
            config,
            covariates: None,
            coef: PROPENSITY_COEF.to_vec(),
        })
    }

    /// Use the given covariate rows; the propensity score is a logistic
    /// score of the column-standardised covariates.
    pub fn with_covariates(mut self, x: Array2<f64>) -> Result<SemiSyntheticDgp> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Data("covariate table is empty".into()));
        }
        let d = x.ncols();
        let std = crate::data::Standardizer::fit(&x);
        let mut z = x.clone();
        for mut r in z.rows_mut() {
            let s = std.apply(&r.to_vec());
            r.assign(&ndarray::ArrayView1::from(&s));
        }
        self.coef = (0..d)
            .map(|j| PROPENSITY_COEF[j % SYNTHETIC_DIM] / (d as f64 / 8.0).sqrt().max(1.0))
            .collect();
        self.covariates = Some(z);
        Ok(self)
    }

    pub fn pi_hat(&self, x: &[f64]) -> f64 {
        let s: f64 = x.iter().zip(&self.coef).map(|(a, b)| a * b).sum();
        sigmoid(PROPENSITY_INTERCEPT + s)
    }

    pub fn weight(&self, x: &[f64], u: f64) -> f64 {
        let g = self.config.gamma;
        let pi = self.pi_hat(x);
        let cut = 2.0 - 1.0 / pi;
        if g >= cut {
            g + 2.0 * u * (1.0 - g)
        } else {
            cut + 2.0 * u * (1.0 / pi - 1.0)
        }
    }

    /// `P(A = 1 | x, u)`; errors if it leaves `[0, 1]`.
    pub fn full_propensity(&self, x: &[f64], u: f64) -> Result<f64> {
        let p = self.weight(x, u) * self.pi_hat(x);
        if !(-1e-12..=1.0 + 1e-12).contains(&p) {
            return Err(Error::Positivity(format!("full propensity {p} outside [0, 1]")));
        }
        Ok(p.clamp(0.0, 1.0))
    }

    fn draw_covariates(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        if let Some(c) = &self.covariates {
            return c.row(rng.random_range(0..c.nrows())).to_vec();
        }
        let mut x = Vec::with_capacity(SYNTHETIC_DIM);
        let mut prev: f64 = StandardNormal.sample(rng);
        x.push(prev);
        for _ in 1..GAUSSIAN_DIM {
            let e: f64 = StandardNormal.sample(rng);
            prev = 0.5 * prev + (0.75f64).sqrt() * e;
            x.push(prev);
        }
        x.push(if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
        x.push(if rng.random::<f64>() < sigmoid(x[0]) { 1.0 } else { 0.0 });
        x
    }

    fn outcome_mean(&self, x: &[f64], a: f64, u: f64) -> f64 {
        (2.0 * a - 1.0) * (x.iter().sum::<f64>() + u) / (x.len() as f64 + 1.0)
    }
}

impl Propensity for SemiSyntheticDgp {
    fn kind(&self) -> TreatmentKind {
        TreatmentKind::Binary
    }

    fn prob(&self, x: &[f64], a: f64) -> f64 {
        let p = self.pi_hat(x);
        if a == 1.0 {
            p
        } else {
            1.0 - p
        }
    }
}

impl Dgp for SemiSyntheticDgp {
    fn name(&self) -> &'static str {
        "semisynthetic"
    }

    fn d_x(&self) -> usize {
        self.covariates.as_ref().map_or(SYNTHETIC_DIM, |c| c.ncols())
    }

    fn d_y(&self) -> usize {
        1
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.config.noise_sd).map_err(|e| Error::config(e.to_string()))?;
        let d = self.d_x();
        let mut x = Array2::zeros((n, d));
        let mut y = Array2::zeros((n, 1));
        let mut a = Vec::with_capacity(n);
        for i in 0..n {
            let xi = self.draw_covariates(&mut rng);
            let u: f64 = rng.random();
            let ai = if rng.random::<f64>() < self.full_propensity(&xi, u)? {
                1.0
            } else {
                0.0
            };
            y[[i, 0]] = self.outcome_mean(&xi, ai, u) + noise.sample(&mut rng);
            for (j, v) in xi.into_iter().enumerate() {
                x[[i, j]] = v;
            }
            a.push(ai);
        }
        Dataset::new(x, a, y)
    }

    fn truth(&self, x: &[f64], a: f64) -> Vec<f64> {
        vec![self.outcome_mean(x, a, 0.5)]
    }

    /// Midpoint grid on `[0, 1]` plus the two endpoints with zero weight,
    /// so suprema see the extremes of the linear weight.
    fn latent(&self, x: &[f64], a: f64) -> Result<LatentDensities> {
        let m = self.config.grid;
        let pi = self.pi_hat(x);
        let p_a = if a == 1.0 { pi } else { 1.0 - pi };
        let mut us: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) / m as f64).collect();
        let mut weights = vec![1.0 / m as f64; m];
        us.extend([0.0, 1.0]);
        weights.extend([0.0, 0.0]);
        let mut p_u_xa = Vec::with_capacity(us.len());
        for &u in &us {
            let p = self.full_propensity(x, u)?;
            p_u_xa.push(if a == 1.0 { p } else { 1.0 - p } / p_a);
        }
        Ok(LatentDensities {
            weights,
            p_u_x: vec![1.0; us.len()],
            p_u_xa,
            p_a_x: Some(p_a),
        })
    }

    fn models(&self) -> Vec<SensitivityKind> {
        binary_models()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::oracle_gamma;
    use crate::stats;

    fn dgp() -> SemiSyntheticDgp {
        SemiSyntheticDgp::new(SemiSyntheticConfig::default()).unwrap()
    }

    #[test]
    fn weight_has_unit_mean_and_valid_propensity() {
        let d = dgp();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = d.draw_covariates(&mut rng);
            let m = 4000;
            let mean = (0..m).map(|i| d.weight(&x, (i as f64 + 0.5) / m as f64)).sum::<f64>() / m as f64;
            assert!((mean - 1.0).abs() < 1e-9);
            assert!(d.full_propensity(&x, 0.0).is_ok() && d.full_propensity(&x, 1.0).is_ok());
        }
    }

    #[test]
    fn gamma_one_removes_confounding() {
        let d = SemiSyntheticDgp::new(SemiSyntheticConfig {
            gamma: 1.0,
            ..SemiSyntheticConfig::default()
        })
        .unwrap();
        let x = [0.1; 8];
        if 2.0 - 1.0 / d.pi_hat(&x) <= 1.0 {
            assert_eq!(d.weight(&x, 0.0), 1.0);
            assert_eq!(d.weight(&x, 0.9), 1.0);
        }
        let lat = d.latent(&x, 1.0).unwrap();
        assert!((oracle_gamma(&lat, SensitivityKind::Msm).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn observed_propensity_is_preserved() {
        let d = dgp();
        let n = 100_000;
        let data = d.sample(n, 4).unwrap();
        let pis: Vec<f64> = (0..n).map(|i| d.pi_hat(&data.x_row(i).to_vec())).collect();
        for (lo, hi) in [(0.0, 0.35), (0.35, 0.45), (0.45, 0.55), (0.55, 1.0)] {
            let idx: Vec<usize> = (0..n).filter(|&i| pis[i] >= lo && pis[i] < hi).collect();
            let emp = stats::mean(&idx.iter().map(|&i| data.a[i]).collect::<Vec<_>>());
            let expect = stats::mean(&idx.iter().map(|&i| pis[i]).collect::<Vec<_>>());
            let se = (expect * (1.0 - expect) / idx.len() as f64).sqrt();
            assert!((emp - expect).abs() <= 3.0 * se, "[{lo},{hi}): {emp} vs {expect}");
        }
    }

    #[test]
    fn cate_formula() {
        let d = dgp();
        let x = [0.5, -0.2, 0.1, 0.0, 0.3, -0.4, 1.0, 0.0];
        let cate = d.truth(&x, 1.0)[0] - d.truth(&x, 0.0)[0];
        assert!((cate - 2.0 * (1.3 + 0.5) / 9.0).abs() < 1e-12);
    }

    #[test]
    fn supplied_covariates_are_used() {
        let x = Array2::from_shape_fn((50, 3), |(i, j)| (i * 3 + j) as f64);
        let d = dgp().with_covariates(x).unwrap();
        assert_eq!(d.d_x(), 3);
        let data = d.sample(20, 0).unwrap();
        assert_eq!(data.d_x(), 3);
    }
}
