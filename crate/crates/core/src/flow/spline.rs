//! Monotone rational-quadratic spline on `[-B, B]`, identity outside.
//!
//! Raw parameters per dimension: `K` width logits, `K` height logits and
//! `K - 1` interior derivative pre-activations. Boundary derivatives are
//! pinned to 1 so the spline joins the identity tails smoothly.

use crate::autodiff::Real;

pub const MIN_BIN: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

pub fn raw_param_count(num_bins: usize) -> usize {
    3 * num_bins - 1
}

/// Pre-activation that maps to a knot derivative of exactly 1.
pub fn identity_derivative_raw() -> f64 {
    // softplus^{-1}(1 - MIN_DERIVATIVE)
    (1.0 - MIN_DERIVATIVE).exp_m1().ln()
}

pub fn identity_raw(num_bins: usize) -> Vec<f64> {
    let mut raw = vec![0.0; raw_param_count(num_bins)];
    for r in raw.iter_mut().skip(2 * num_bins) {
        *r = identity_derivative_raw();
    }
    raw
}

#[derive(Clone, Debug)]
pub struct Knots<T> {
    pub xs: Vec<T>,
    pub ys: Vec<T>,
    pub ds: Vec<T>,
    pub bound: f64,
}

fn softmax_cumulative<T: Real>(logits: &[T], bound: f64) -> Vec<T> {
    let k = logits.len();
    let m = logits.iter().map(|l| l.val()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let inv_total = T::sum(&e).recip();
    let scale = 2.0 * bound * (1.0 - MIN_BIN * k as f64);
    let floor = 2.0 * bound * MIN_BIN;
    let mut knots = Vec::with_capacity(k + 1);
    let mut acc = T::cst(-bound);
    knots.push(acc);
    for ei in e.iter().take(k - 1) {
        acc = acc + *ei * inv_total * scale + floor;
        knots.push(acc);
    }
    knots.push(T::cst(bound));
    knots
}

impl<T: Real> Knots<T> {
    pub fn from_raw(raw: &[T], num_bins: usize, bound: f64) -> Knots<T> {
        debug_assert_eq!(raw.len(), raw_param_count(num_bins));
        let xs = softmax_cumulative(&raw[..num_bins], bound);
        let ys = softmax_cumulative(&raw[num_bins..2 * num_bins], bound);
        let mut ds = Vec::with_capacity(num_bins + 1);
        ds.push(T::cst(1.0));
        for &r in &raw[2 * num_bins..] {
            ds.push(r.softplus() + MIN_DERIVATIVE);
        }
        ds.push(T::cst(1.0));
        Knots { xs, ys, ds, bound }
    }

    pub fn num_bins(&self) -> usize {
        self.xs.len() - 1
    }

    fn bin(edges: &[T], v: f64) -> usize {
        let k = edges.len() - 1;
        edges[1..k].partition_point(|e| e.val() <= v)
    }

    fn eval_in_bin(&self, k: usize, xi: T) -> (T, T) {
        let w = self.xs[k + 1] - self.xs[k];
        let h = self.ys[k + 1] - self.ys[k];
        let s = h / w;
        let (d0, d1) = (self.ds[k], self.ds[k + 1]);
        let t = xi * (T::cst(1.0) - xi);
        let denom = s + (d1 + d0 - s * 2.0) * t;
        let y = self.ys[k] + h * (s * xi.square() + d0 * t) / denom;
        let one_minus = T::cst(1.0) - xi;
        let dnum = s.square() * (d1 * xi.square() + s * t * 2.0 + d0 * one_minus.square());
        (y, dnum.ln() - denom.ln() * 2.0)
    }

    /// `(y, log dy/dx)`.
    pub fn forward(&self, x: T) -> (T, T) {
        let v = x.val();
        if v <= -self.bound || v >= self.bound {
            return (x, T::cst(0.0));
        }
        let k = Self::bin(&self.xs, v);
        let xi = (x - self.xs[k]) / (self.xs[k + 1] - self.xs[k]);
        self.eval_in_bin(k, xi)
    }

    /// `(x, log dx/dy)`.
    pub fn inverse(&self, y: T) -> (T, T) {
        let v = y.val();
        if v <= -self.bound || v >= self.bound {
            return (y, T::cst(0.0));
        }
        let k = Self::bin(&self.ys, v);
        let w = self.xs[k + 1] - self.xs[k];
        let h = self.ys[k + 1] - self.ys[k];
        let s = h / w;
        let (d0, d1) = (self.ds[k], self.ds[k + 1]);
        let dy = y - self.ys[k];
        let slope_sum = d1 + d0 - s * 2.0;
        let a = h * (s - d0) + dy * slope_sum;
        let b = h * d0 - dy * slope_sum;
        let c = -(s * dy);
        let disc = (b.square() - a * c * 4.0).max_of(T::cst(0.0));
        let xi = c * 2.0 / (-b - disc.sqrt());
        let x = xi * w + self.xs[k];
        let (_, logdet) = self.eval_in_bin(k, xi);
        (x, -logdet)
    }
}
