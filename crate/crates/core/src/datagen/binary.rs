use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{binary_models, Dgp, LatentDensities};
use crate::data::{Dataset, TreatmentKind};
use crate::error::{Error, Result};
use crate::observational::Propensity;
use crate::sensitivity::SensitivityKind;
use crate::stats::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinaryMsmDgpConfig {
    pub n: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for BinaryMsmDgpConfig {
    fn default() -> Self {
        BinaryMsmDgpConfig {
            n: 10_000,
            gamma: 2.0,
            seed: 0,
        }
    }
}

/// `X ~ U[-1, 1]`, binary `U`, and a full propensity whose odds ratio to
/// `pi(x) = 0.25 + 0.5 sigmoid(3x)` is exactly `gamma` or `1/gamma`.
#[derive(Clone, Debug)]
pub struct BinaryMsmDgp {
    pub gamma: f64,
}

impl BinaryMsmDgp {
    pub fn new(gamma: f64) -> Result<BinaryMsmDgp> {
        if !(gamma >= 1.0) || !gamma.is_finite() {
            return Err(Error::config(format!("generative gamma must be >= 1, got {gamma}")));
        }
        Ok(BinaryMsmDgp { gamma })
    }

    pub fn pi(x: f64) -> f64 {
        0.25 + 0.5 * sigmoid(3.0 * x)
    }

    pub fn p_u1(&self, x: f64) -> f64 {
        ((self.gamma - 1.0) * Self::pi(x) + 1.0) / (self.gamma + 1.0)
    }

    /// `P(A = 1 | x, u)`.
    pub fn full_propensity(&self, x: f64, u: f64) -> f64 {
        let pi = Self::pi(x);
        let g = self.gamma;
        let s_plus = 1.0 / ((1.0 - 1.0 / g) * pi + 1.0 / g);
        let s_minus = 1.0 / ((1.0 - g) * pi + g);
        u * pi * s_plus + (1.0 - u) * pi * s_minus
    }

    pub fn outcome_mean(x: f64, a: f64, u: f64) -> f64 {
        let s = 2.0 * a - 1.0;
        s * x + s - 2.0 * (2.0 * s * x).sin() - 2.0 * (2.0 * u - 1.0) * (1.0 + 0.5 * x)
    }
}

impl Propensity for BinaryMsmDgp {
    fn kind(&self) -> TreatmentKind {
        TreatmentKind::Binary
    }

    fn prob(&self, x: &[f64], a: f64) -> f64 {
        let p = Self::pi(x[0]);
        if a == 1.0 {
            p
        } else {
            1.0 - p
        }
    }
}

impl Dgp for BinaryMsmDgp {
    fn name(&self) -> &'static str {
        "binary"
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
            let xi: f64 = rng.random_range(-1.0..1.0);
            let u = if rng.random::<f64>() < self.p_u1(xi) { 1.0 } else { 0.0 };
            let ai = if rng.random::<f64>() < self.full_propensity(xi, u) {
                1.0
            } else {
                0.0
            };
            let e: f64 = StandardNormal.sample(&mut rng);
            x[[i, 0]] = xi;
            a.push(ai);
            y[[i, 0]] = Self::outcome_mean(xi, ai, u) + e;
        }
        Dataset::new(x, a, y)
    }

    fn truth(&self, x: &[f64], a: f64) -> Vec<f64> {
        let p1 = self.p_u1(x[0]);
        vec![p1 * Self::outcome_mean(x[0], a, 1.0) + (1.0 - p1) * Self::outcome_mean(x[0], a, 0.0)]
    }

    fn latent(&self, x: &[f64], a: f64) -> Result<LatentDensities> {
        let p1 = self.p_u1(x[0]);
        let p_u_x = vec![1.0 - p1, p1];
        let p_a_u: Vec<f64> = [0.0, 1.0]
            .iter()
            .map(|&u| {
                let p = self.full_propensity(x[0], u);
                if a == 1.0 {
                    p
                } else {
                    1.0 - p
                }
            })
            .collect();
        let p_a = self.prob(x, a);
        let p_u_xa = (0..2).map(|u| p_a_u[u] * p_u_x[u] / p_a).collect();
        Ok(LatentDensities {
            weights: vec![1.0, 1.0],
            p_u_x,
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
    use crate::sensitivity::{rho_pairwise, FDivergence};
    use crate::stats;

    #[test]
    fn propensity_at_zero() {
        assert_eq!(BinaryMsmDgp::pi(0.0), 0.5);
    }

    #[test]
    fn rejects_gamma_below_one() {
        assert!(BinaryMsmDgp::new(0.9).is_err());
    }

    #[test]
    fn full_propensity_marginalises_and_has_fixed_odds_ratio() {
        let d = BinaryMsmDgp::new(2.0).unwrap();
        let odds = |p: f64| p / (1.0 - p);
        for &x in &[-0.9, -0.2, 0.0, 0.5, 1.0] {
            let p1 = d.p_u1(x);
            let pi = BinaryMsmDgp::pi(x);
            let marg = p1 * d.full_propensity(x, 1.0) + (1.0 - p1) * d.full_propensity(x, 0.0);
            assert!((marg - pi).abs() < 1e-12);
            assert!((odds(d.full_propensity(x, 1.0)) / odds(pi) - 2.0).abs() < 1e-12);
            assert!((odds(d.full_propensity(x, 0.0)) / odds(pi) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_odds_ratios_and_propensity() {
        let d = BinaryMsmDgp::new(2.0).unwrap();
        let n = 100_000;
        let data = d.sample(n, 5).unwrap();
        // Re-simulate U alongside with the same stream to check the odds ratio.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [[0.0f64; 2]; 2]; // [u][a]
        for _ in 0..n {
            let xi: f64 = rng.random_range(-1.0..1.0);
            let u = (rng.random::<f64>() < d.p_u1(xi)) as usize;
            let ai = (rng.random::<f64>() < d.full_propensity(xi, u as f64)) as usize;
            let _: f64 = StandardNormal.sample(&mut rng);
            if xi.abs() < 0.1 {
                counts[u][ai] += 1.0;
            }
        }
        let p_u1 = counts[1][1] / (counts[1][0] + counts[1][1]);
        let pi = (counts[0][1] + counts[1][1]) / counts.iter().flatten().sum::<f64>();
        let or = (p_u1 / (1.0 - p_u1)) / (pi / (1.0 - pi));
        assert!((or - 2.0).abs() / 2.0 <= 0.05, "odds ratio {or}");
        // Observed propensity in x bins.
        for b in 0..4 {
            let lo = -1.0 + 0.5 * b as f64;
            let idx: Vec<usize> = (0..n)
                .filter(|&i| data.x[[i, 0]] >= lo && data.x[[i, 0]] < lo + 0.5)
                .collect();
            let emp = stats::mean(&idx.iter().map(|&i| data.a[i]).collect::<Vec<_>>());
            let expect = stats::mean(
                &idx.iter()
                    .map(|&i| BinaryMsmDgp::pi(data.x[[i, 0]]))
                    .collect::<Vec<_>>(),
            );
            let se = (expect * (1.0 - expect) / idx.len() as f64).sqrt();
            assert!((emp - expect).abs() <= 3.0 * se, "bin {b}: {emp} vs {expect}");
        }
    }

    #[test]
    fn unconfounded_process_is_independent() {
        let d = BinaryMsmDgp::new(1.0).unwrap();
        assert_eq!(d.full_propensity(0.4, 1.0), d.full_propensity(0.4, 0.0));
        let lat = d.latent(&[0.4], 1.0).unwrap();
        for m in binary_models() {
            let g = oracle_gamma(&lat, m).unwrap();
            assert!((g - m.unconfounded_gamma()).abs() < 1e-12, "{m:?}: {g}");
        }
    }

    #[test]
    fn msm_oracle_equals_generative_gamma_everywhere() {
        let d = BinaryMsmDgp::new(2.0).unwrap();
        for &x in &[-1.0, -0.3, 0.0, 0.8] {
            for a in [0.0, 1.0] {
                let g = oracle_gamma(&d.latent(&[x], a).unwrap(), SensitivityKind::Msm).unwrap();
                assert!((g - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn f_and_rosenbaum_oracles_match_exhaustive_summation() {
        let d = BinaryMsmDgp::new(2.0).unwrap();
        for &x in &[-0.7, 0.1, 0.9] {
            for a in [0.0, 1.0] {
                // Direct Bayes over u in {0, 1}, written out independently.
                let p1 = ((2.0 - 1.0) * BinaryMsmDgp::pi(x) + 1.0) / 3.0;
                let pu = [1.0 - p1, p1];
                let pa_u: Vec<f64> = (0..2)
                    .map(|u| {
                        let p = d.full_propensity(x, u as f64);
                        if a == 1.0 {
                            p
                        } else {
                            1.0 - p
                        }
                    })
                    .collect();
                let pa = pa_u[0] * pu[0] + pa_u[1] * pu[1];
                let post = [pa_u[0] * pu[0] / pa, pa_u[1] * pu[1] / pa];
                let rho: Vec<f64> = (0..2).map(|u| (pu[u] / post[u] - pa) / (1.0 - pa)).collect();
                let lat = d.latent(&[x], a).unwrap();
                for f in FDivergence::ALL {
                    let fwd: f64 = (0..2).map(|u| post[u] * f.eval(rho[u])).sum();
                    let rev: f64 = (0..2).map(|u| post[u] * f.eval(1.0 / rho[u])).sum();
                    let g = oracle_gamma(&lat, SensitivityKind::F(f)).unwrap();
                    assert!((g - fwd.max(rev)).abs() < 1e-12);
                }
                let mut rb: f64 = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        let r = rho_pairwise(pu[i], post[i], pu[j], post[j], pa).unwrap();
                        rb = rb.max(r).max(1.0 / r);
                    }
                }
                let g = oracle_gamma(&lat, SensitivityKind::Rosenbaum).unwrap();
                assert!((g - rb).abs() < 1e-9, "{g} vs {rb}");
            }
        }
    }

    #[test]
    fn truth_matches_resimulation() {
        let d = BinaryMsmDgp::new(2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = 0.3;
        let ys: Vec<f64> = (0..200_000)
            .map(|_| {
                let u = if rng.random::<f64>() < d.p_u1(x) { 1.0 } else { 0.0 };
                let e: f64 = StandardNormal.sample(&mut rng);
                BinaryMsmDgp::outcome_mean(x, 1.0, u) + e
            })
            .collect();
        let t = d.truth(&[x], 1.0)[0];
        assert!((stats::mean(&ys) - t).abs() <= 3.0 * stats::std_error(&ys));
    }
}
