use serde::{Deserialize, Serialize};

use super::trainer::{mixing_probability, point_constraint, Stage2Model};
use crate::error::{Error, Result};
use crate::observational::{Propensity, Stage1Model};
use crate::query::{evaluate_query, Direction, QueryValue};
use crate::rng::indexed_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsResult {
    pub x: Vec<f64>,
    pub a: f64,
    pub pi_mix: f64,
    pub lower: QueryValue,
    pub upper: QueryValue,
    /// The query under the unshifted (observational) latent distribution.
    pub plugin: QueryValue,
    pub d_lower: f64,
    pub d_upper: f64,
}

impl BoundsResult {
    pub fn length(&self) -> f64 {
        self.upper.value - self.lower.value
    }

    /// Closed-interval coverage widened by `tol_se` standard errors on each
    /// side.
    pub fn covers(&self, truth: f64, tol_se: f64) -> bool {
        truth >= self.lower.value - tol_se * self.lower.std_error
            && truth <= self.upper.value + tol_se * self.upper.std_error
    }
}

/// Upper and lower query values at each point. All three evaluations at a
/// point share latent draws, so their differences carry no sampling noise
/// from independent streams.
pub fn compute_bounds(
    stage1: &Stage1Model,
    upper: &Stage2Model,
    lower: &Stage2Model,
    prop: &dyn Propensity,
    points: &[(Vec<f64>, f64)],
    k: usize,
    seed: u64,
) -> Result<Vec<BoundsResult>> {
    if upper.spec != lower.spec {
        return Err(Error::config(format!(
            "stage-2 models were trained for different sensitivity specs ({} gamma={} vs {} gamma={})",
            upper.spec.label(),
            upper.spec.gamma,
            lower.spec.label(),
            lower.spec.gamma
        )));
    }
    if upper.query.functional != lower.query.functional {
        return Err(Error::config("stage-2 models were trained for different queries"));
    }
    if upper.direction() != Direction::Upper || lower.direction() != Direction::Lower {
        return Err(Error::config(
            "expected one upper-bound and one lower-bound stage-2 model",
        ));
    }
    let query = &upper.query;
    let mut out = Vec::with_capacity(points.len());
    for (i, (x, a)) in points.iter().enumerate() {
        let pi = mixing_probability(prop, x, *a);
        let s = indexed_seed(seed, "bounds", i as u64);
        let hi = evaluate_query(query, stage1, Some(&upper.flow), x, *a, pi, k, s)?;
        let lo = evaluate_query(query, stage1, Some(&lower.flow), x, *a, pi, k, s)?;
        let plugin = evaluate_query(query, stage1, None, x, *a, pi, k, s)?;
        let c = indexed_seed(seed, "bounds-constraint", i as u64);
        out.push(BoundsResult {
            x: x.clone(),
            a: *a,
            pi_mix: pi,
            lower: lo,
            upper: hi,
            plugin,
            d_lower: point_constraint(stage1, &lower.flow, &lower.spec, x, *a, pi, k, c)?,
            d_upper: point_constraint(stage1, &upper.flow, &upper.spec, x, *a, pi, k, c)?,
        });
    }
    Ok(out)
}
