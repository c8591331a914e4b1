use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{Functional, QuerySpec};
use crate::error::{Error, Result};
use crate::flow::{std_normal_log_density, ConditionalFlow};
use crate::observational::Stage1Model;
use crate::sensitivity::LatentShiftSample;
use crate::stats;

pub const MIN_EVAL_SAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryValue {
    pub value: f64,
    /// Monte-Carlo standard error of `value`.
    pub std_error: f64,
}

/// `k` outcomes (original units) from the shifted interventional
/// distribution: latent draws pass through the second-stage flow unless
/// their mixing indicator fires, then through the first stage. With no
/// second-stage flow this samples the observational distribution.
pub fn shifted_outcomes(
    stage1: &Stage1Model,
    stage2: Option<&ConditionalFlow>,
    x: &[f64],
    a: f64,
    pi_mix: f64,
    k: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let ctx = stage1.ctx(x, a);
    let s1 = stage1.flow.condition(&ctx)?;
    let s2 = stage2.map(|f| f.condition(&ctx)).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = LatentShiftSample::draw(k, stage1.d_y(), pi_mix, &mut rng)?;
    let mut out = Array2::zeros((k, stage1.d_y()));
    for (j, (u, &xi)) in sample.u.iter().zip(&sample.xi).enumerate() {
        let latent = match (&s2, xi) {
            (Some(f), false) => f.forward(u).0,
            _ => u.clone(),
        };
        let y = stage1.y_std.invert(&s1.forward(&latent).0);
        for (d, v) in y.into_iter().enumerate() {
            out[[j, d]] = v;
        }
    }
    Ok(out)
}

/// Log density, in original outcome units, of the shifted interventional
/// distribution at `y`: the latent mixture `pi N(u) + (1 - pi) p~(u)` at
/// `u = f*^{-1}(y)` times the first-stage Jacobian.
pub fn shifted_log_prob(
    stage1: &Stage1Model,
    stage2: &ConditionalFlow,
    y: &[f64],
    x: &[f64],
    a: f64,
    pi_mix: f64,
) -> Result<f64> {
    let ctx = stage1.ctx(x, a);
    let (u, ld1) = stage1.flow.transform_inverse(&stage1.y_std.apply(y), &ctx)?;
    let (z, ld2) = stage2.transform_inverse(&u, &ctx)?;
    let base = std_normal_log_density(&u);
    let shifted = std_normal_log_density(&z) + ld2;
    let latent = if pi_mix > 0.0 {
        let (p, q) = (base + pi_mix.ln(), shifted + (1.0 - pi_mix).ln());
        p.max(q) + (-(p - q).abs()).exp().ln_1p()
    } else {
        shifted
    };
    Ok(latent + ld1 - stage1.y_std.log_scale())
}

/// Apply the query functional to an outcome sample.
pub fn apply_functional(query: &QuerySpec, ys: &Array2<f64>) -> QueryValue {
    let k = ys.nrows() as f64;
    match &query.functional {
        Functional::Expectation { index } => {
            let col = ys.column(*index).to_vec();
            QueryValue {
                value: stats::mean(&col),
                std_error: stats::std_error(&col),
            }
        }
        Functional::SetProbability { region } => {
            let hits = ys
                .rows()
                .into_iter()
                .filter(|r| r.iter().zip(region).all(|(v, i)| i.contains(*v)))
                .count() as f64;
            let p = hits / k;
            QueryValue {
                value: p,
                std_error: (p * (1.0 - p) / k).sqrt(),
            }
        }
        Functional::Quantile { level, index } => {
            let s = stats::sorted(&ys.column(*index).to_vec());
            let delta = (level * (1.0 - level) / k).sqrt();
            let spread = stats::quantile_sorted(&s, level + delta) - stats::quantile_sorted(&s, level - delta);
            QueryValue {
                value: stats::quantile_sorted(&s, *level),
                std_error: 0.5 * spread,
            }
        }
    }
}

/// Monte-Carlo value of the query under the shifted distribution.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_query(
    query: &QuerySpec,
    stage1: &Stage1Model,
    stage2: Option<&ConditionalFlow>,
    x: &[f64],
    a: f64,
    pi_mix: f64,
    k: usize,
    seed: u64,
) -> Result<QueryValue> {
    if k < MIN_EVAL_SAMPLES {
        return Err(Error::config(format!(
            "query evaluation needs k >= {MIN_EVAL_SAMPLES}, got {k}"
        )));
    }
    query.validate_dims(stage1.d_y())?;
    let ys = shifted_outcomes(stage1, stage2, x, a, pi_mix, k, seed)?;
    Ok(apply_functional(query, &ys))
}
