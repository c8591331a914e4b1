//! Per-unit Monte-Carlo second-stage losses.

use super::spec::{Functional, QuerySpec};
use crate::autodiff::Real;
use crate::stats::quantile_sorted;

/// Pushed samples for one unit: outcomes (standardised units) and the
/// log-likelihood of each under the shifted distribution.
pub struct UnitSamples<T> {
    pub y: Vec<Vec<T>>,
    pub log_lik: Vec<T>,
}

/// Query-dependent part of the objective for one unit, oriented so that
/// larger is better for the requested direction, plus whether the
/// membership set was empty.
///
/// Set membership is decided on detached values; gradients flow only
/// through the log-likelihood terms. The quantile loss maximises the
/// likelihood of the region *below* the current empirical quantile for a
/// lower bound and minimises it for an upper bound.
pub fn unit_objective<T: Real>(query: &QuerySpec, s: &UnitSamples<T>) -> (T, bool) {
    let k = s.y.len() as f64;
    let sign = query.direction.sign();
    match &query.functional {
        Functional::Expectation { index } => {
            let ys: Vec<T> = s.y.iter().map(|y| y[*index]).collect();
            (T::sum(&ys) * (sign / k), false)
        }
        Functional::SetProbability { region } => {
            let inside: Vec<T> =
                s.y.iter()
                    .zip(&s.log_lik)
                    .filter(|(y, _)| y.iter().zip(region).all(|(v, r)| r.contains(v.val())))
                    .map(|(_, &ll)| ll)
                    .collect();
            let empty = inside.is_empty();
            (T::sum(&inside) * (sign / k), empty)
        }
        Functional::Quantile { level, index } => {
            let mut vals: Vec<f64> = s.y.iter().map(|y| y[*index].val()).collect();
            vals.sort_by(f64::total_cmp);
            let q = quantile_sorted(&vals, *level);
            let below: Vec<T> =
                s.y.iter()
                    .zip(&s.log_lik)
                    .filter(|(y, _)| y[*index].val() <= q)
                    .map(|(_, &ll)| ll)
                    .collect();
            let empty = below.is_empty();
            (T::sum(&below) * (-sign / k), empty)
        }
    }
}
