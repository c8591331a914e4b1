//! Simulated data-generating processes with known interventional outcomes
//! and latent-confounder posteriors.

pub mod binary;
pub mod continuous;
pub mod oracle;
pub mod semisynthetic;
pub mod two_outcome;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::observational::Propensity;
use crate::sensitivity::{FDivergence, SensitivityKind};

pub use binary::{BinaryMsmDgp, BinaryMsmDgpConfig};
pub use continuous::{ContinuousDgp, ContinuousDgpConfig};
pub use oracle::{oracle_gamma, LatentDensities};
pub use semisynthetic::{SemiSyntheticConfig, SemiSyntheticDgp};
pub use two_outcome::{TwoOutcomeDgp, TwoOutcomeDgpConfig};

pub const GROUND_TRUTH_VERSION: u32 = 1;

pub trait Dgp: Propensity {
    fn name(&self) -> &'static str;
    fn d_x(&self) -> usize;
    fn d_y(&self) -> usize;
    fn sample(&self, n: usize, seed: u64) -> Result<Dataset>;
    /// `E[Y(a) | x]` per outcome dimension.
    fn truth(&self, x: &[f64], a: f64) -> Vec<f64>;
    /// `P(u | x)` and `P(u | x, a)` of the generative process.
    fn latent(&self, x: &[f64], a: f64) -> Result<LatentDensities>;
    /// Sensitivity models that apply to this treatment type.
    fn models(&self) -> Vec<SensitivityKind>;
}

/// The six models of the binary experiments.
pub fn binary_models() -> Vec<SensitivityKind> {
    let mut m = vec![SensitivityKind::Msm];
    m.extend(FDivergence::ALL.iter().map(|&f| SensitivityKind::F(f)));
    m.push(SensitivityKind::Rosenbaum);
    m
}

/// As [`binary_models`] with the CMSM in place of the MSM.
pub fn continuous_models() -> Vec<SensitivityKind> {
    let mut m = binary_models();
    m[0] = SensitivityKind::Cmsm;
    m
}

/// 101 equispaced covariate values on `[-1, 1]`.
pub fn x_grid() -> Vec<f64> {
    crate::stats::linspace(-1.0, 1.0, 101)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPoint {
    pub x: Vec<f64>,
    pub a: f64,
    pub truth: Vec<f64>,
    /// Per model label; infinite (written as `"inf"`) where the process
    /// violates the model for every finite parameter.
    #[serde(with = "extended_reals")]
    pub oracle_gamma: BTreeMap<String, f64>,
}

/// JSON has no infinity; `+inf` round-trips through the string `"inf"`.
mod extended_reals {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        let out: BTreeMap<&String, Repr> = m
            .iter()
            .map(|(k, &v)| {
                let r = if v == f64::INFINITY {
                    Repr::Text("inf".into())
                } else {
                    Repr::Num(v)
                };
                (k, r)
            })
            .collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        BTreeMap::<String, Repr>::deserialize(d)?
            .into_iter()
            .map(|(k, r)| match r {
                Repr::Num(v) => Ok((k, v)),
                Repr::Text(t) if t == "inf" => Ok((k, f64::INFINITY)),
                Repr::Text(t) => Err(serde::de::Error::custom(format!(
                    "expected a number or \"inf\", got {t:?}"
                ))),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub format_version: u32,
    pub dgp: String,
    pub config: serde_json::Value,
    pub points: Vec<GroundTruthPoint>,
}

impl GroundTruth {
    pub fn compute(dgp: &dyn Dgp, config: serde_json::Value, points: &[(Vec<f64>, f64)]) -> Result<GroundTruth> {
        let models = dgp.models();
        let mut out = Vec::with_capacity(points.len());
        for (x, a) in points {
            let lat = dgp.latent(x, *a)?;
            let mut og = BTreeMap::new();
            for &m in &models {
                og.insert(m.label().to_owned(), oracle_gamma(&lat, m)?);
            }
            out.push(GroundTruthPoint {
                x: x.clone(),
                a: *a,
                truth: dgp.truth(x, *a),
                oracle_gamma: og,
            });
        }
        Ok(GroundTruth {
            format_version: GROUND_TRUTH_VERSION,
            dgp: dgp.name().to_owned(),
            config,
            points: out,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GroundTruth> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// `Gamma*` averaged over a uniform covariate on `[-1, 1]` (midpoint rule
/// with `n` nodes), the aggregate used for continuous treatments.
pub fn x_averaged_gamma(dgp: &dyn Dgp, kind: SensitivityKind, a: f64, n: usize) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..n {
        let x = -1.0 + (i as f64 + 0.5) * 2.0 / n as f64;
        total += oracle_gamma(&dgp.latent(&[x], a)?, kind)?;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_oracle_values_round_trip() {
        let mut og = BTreeMap::new();
        og.insert("msm".to_owned(), f64::INFINITY);
        og.insert("kl".to_owned(), 0.25);
        let gt = GroundTruth {
            format_version: GROUND_TRUTH_VERSION,
            dgp: "t".into(),
            config: serde_json::Value::Null,
            points: vec![GroundTruthPoint {
                x: vec![0.0],
                a: 1.0,
                truth: vec![1.0],
                oracle_gamma: og,
            }],
        };
        let text = serde_json::to_string(&gt).unwrap();
        assert!(text.contains(r#""msm":"inf""#));
        assert_eq!(serde_json::from_str::<GroundTruth>(&text).unwrap(), gt);
    }
}
