use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::spline::{identity_raw, raw_param_count, Knots};
use crate::autodiff::Real;
use crate::error::{ensure_finite, Error, Result};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub d_x: usize,
    pub d_a: usize,
    pub d_y: usize,
    pub num_bins: usize,
    pub tail_bound: f64,
    pub hidden: Vec<usize>,
}

impl FlowConfig {
    pub fn new(d_x: usize, d_a: usize, d_y: usize) -> FlowConfig {
        FlowConfig {
            d_x,
            d_a,
            d_y,
            num_bins: 8,
            tail_bound: 10.0,
            hidden: vec![32, 32],
        }
    }

    pub fn with_bins(mut self, num_bins: usize) -> Self {
        self.num_bins = num_bins;
        self
    }

    pub fn with_hidden(mut self, hidden: &[usize]) -> Self {
        self.hidden = hidden.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_y == 0 {
            return Err(Error::config("flow needs d_y >= 1"));
        }
        if self.num_bins < 2 {
            return Err(Error::config("spline needs at least 2 bins"));
        }
        if !(self.tail_bound > 0.0 && self.tail_bound.is_finite()) {
            return Err(Error::config("tail_bound must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer of width 0"));
        }
        Ok(())
    }

    pub fn d_ctx(&self) -> usize {
        self.d_x + self.d_a
    }

    pub fn raw_per_dim(&self) -> usize {
        raw_param_count(self.num_bins)
    }

    /// Conditioner for outcome dimension `j`: input `(x, a, y_<j)`.
    pub fn conditioner(&self, j: usize) -> Mlp {
        Mlp::new(self.d_ctx() + j, &self.hidden, self.raw_per_dim())
    }

    pub fn param_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut off = 0;
        (0..self.d_y)
            .map(|j| {
                let n = self.conditioner(j).param_count();
                off += n;
                off - n..off
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        (0..self.d_y).map(|j| self.conditioner(j).param_count()).sum()
    }

    /// Layer sizes of every conditioner, for checkpoint headers.
    pub fn layer_sizes(&self) -> Vec<Vec<usize>> {
        (0..self.d_y).map(|j| self.conditioner(j).sizes).collect()
    }
}

/// A flow specialised to one conditioning context. Dimension 0's spline is
/// computed once; later dimensions depend on preceding outcomes.
pub struct Conditioned<'a, T> {
    cfg: &'a FlowConfig,
    params: &'a [T],
    ctx: Vec<T>,
    first: Knots<T>,
}

impl<'a, T: Real> Conditioned<'a, T> {
    pub fn new(cfg: &'a FlowConfig, params: &'a [T], ctx: &[T]) -> Self {
        debug_assert_eq!(params.len(), cfg.param_count());
        debug_assert_eq!(ctx.len(), cfg.d_ctx());
        let range = cfg.param_ranges().swap_remove(0);
        let raw = cfg.conditioner(0).forward(&params[range], ctx);
        let first = Knots::from_raw(&raw, cfg.num_bins, cfg.tail_bound);
        Conditioned {
            cfg,
            params,
            ctx: ctx.to_vec(),
            first,
        }
    }

    pub fn config(&self) -> &FlowConfig {
        self.cfg
    }

    /// Spline of the first outcome dimension (the only one when `d_y = 1`).
    pub fn first_knots(&self) -> &Knots<T> {
        &self.first
    }

    fn knots_for(&self, j: usize, prev: &[T]) -> Knots<T> {
        let range = self.cfg.param_ranges().swap_remove(j);
        let mut input = self.ctx.clone();
        input.extend_from_slice(&prev[..j]);
        let raw = self.cfg.conditioner(j).forward(&self.params[range], &input);
        Knots::from_raw(&raw, self.cfg.num_bins, self.cfg.tail_bound)
    }

    /// Latent to outcome: `(y, log|det dy/du|)`.
    pub fn forward(&self, u: &[T]) -> (Vec<T>, T) {
        let (y0, mut logdet) = self.first.forward(u[0]);
        let mut y = vec![y0];
        for (j, &uj) in u.iter().enumerate().skip(1) {
            let (yj, ld) = self.knots_for(j, &y).forward(uj);
            y.push(yj);
            logdet += ld;
        }
        (y, logdet)
    }

    /// Outcome to latent: `(u, log|det du/dy|)`.
    pub fn inverse(&self, y: &[T]) -> (Vec<T>, T) {
        let (u0, mut logdet) = self.first.inverse(y[0]);
        let mut u = vec![u0];
        for j in 1..self.cfg.d_y {
            let (uj, ld) = self.knots_for(j, y).inverse(y[j]);
            u.push(uj);
            logdet += ld;
        }
        (u, logdet)
    }

    pub fn log_prob(&self, y: &[T]) -> T {
        let (u, logdet) = self.inverse(y);
        std_normal_log_density(&u) + logdet
    }
}

pub fn std_normal_log_density<T: Real>(u: &[T]) -> T {
    let sq: Vec<T> = u.iter().map(|v| v.square()).collect();
    T::sum(&sq) * -0.5 - LN_SQRT_2PI * u.len() as f64
}

/// Concatenate covariates and treatment into a conditioning vector.
pub fn context(x: &[f64], a: &[f64]) -> Vec<f64> {
    let mut c = x.to_vec();
    c.extend_from_slice(a);
    c
}

/// Conditional spline flow with frozen `f64` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalFlow {
    pub config: FlowConfig,
    pub params: Vec<f64>,
}

impl ConditionalFlow {
    /// Random hidden layers, output layer emitting the identity spline.
    pub fn identity(config: FlowConfig, seed: u64) -> Result<ConditionalFlow> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias = identity_raw(config.num_bins);
        let mut params = Vec::with_capacity(config.param_count());
        for j in 0..config.d_y {
            params.extend(config.conditioner(j).init(&mut rng, Some(&bias)));
        }
        Ok(ConditionalFlow { config, params })
    }

    pub fn from_params(config: FlowConfig, params: Vec<f64>) -> Result<ConditionalFlow> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::Dimension {
                expected: config.param_count(),
                got: params.len(),
                context: "flow parameter vector".into(),
            });
        }
        ensure_finite(&params, "flow parameters")?;
        Ok(ConditionalFlow { config, params })
    }

    pub fn condition(&self, ctx: &[f64]) -> Result<Conditioned<'_, f64>> {
        self.check_ctx(ctx)?;
        Ok(Conditioned::new(&self.config, &self.params, ctx))
    }

    fn check_ctx(&self, ctx: &[f64]) -> Result<()> {
        if ctx.len() != self.config.d_ctx() {
            return Err(Error::Dimension {
                expected: self.config.d_ctx(),
                got: ctx.len(),
                context: "conditioning context".into(),
            });
        }
        ensure_finite(ctx, "conditioning context")
    }

    fn check_point(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.config.d_y {
            return Err(Error::Dimension {
                expected: self.config.d_y,
                got: v.len(),
                context: what.into(),
            });
        }
        ensure_finite(v, what)
    }

    pub fn transform_forward(&self, u: &[f64], ctx: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_point(u, "latent input")?;
        let out = self.condition(ctx)?.forward(u);
        ensure_finite(&out.0, "flow output")?;
        Ok(out)
    }

    pub fn transform_inverse(&self, y: &[f64], ctx: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_point(y, "outcome input")?;
        let out = self.condition(ctx)?.inverse(y);
        ensure_finite(&out.0, "flow output")?;
        Ok(out)
    }

    pub fn log_prob(&self, y: &[f64], ctx: &[f64]) -> Result<f64> {
        self.check_point(y, "outcome input")?;
        Ok(self.condition(ctx)?.log_prob(y))
    }

    /// `count x d_y` samples `f(u_i)`, `u_i` standard normal from `seed`.
    pub fn sample(&self, ctx: &[f64], count: usize, seed: u64) -> Result<Array2<f64>> {
        let cond = self.condition(ctx)?;
        let d = self.config.d_y;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Array2::zeros((count, d));
        let mut u = vec![0.0; d];
        for mut row in out.rows_mut() {
            for v in u.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let (y, _) = cond.forward(&u);
            for (r, v) in row.iter_mut().zip(y) {
                *r = v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Var};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn perturbed(cfg: FlowConfig, seed: u64, scale: f64) -> ConditionalFlow {
        let mut flow = ConditionalFlow::identity(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for p in flow.params.iter_mut() {
            *p += rng.random_range(-scale..scale);
        }
        flow
    }

    #[test]
    fn identity_flow_log_prob() {
        let f1 = ConditionalFlow::identity(FlowConfig::new(1, 1, 1), 0).unwrap();
        assert_relative_eq!(f1.log_prob(&[0.0], &[0.2, 1.0]).unwrap(), -0.918_938_5, epsilon = 1e-7);
        let f2 = ConditionalFlow::identity(FlowConfig::new(1, 1, 2), 0).unwrap();
        assert_relative_eq!(
            f2.log_prob(&[0.0, 0.0], &[0.2, 1.0]).unwrap(),
            -1.837_877,
            epsilon = 1e-6
        );
        let (u, ld) = f1.transform_inverse(&[0.7], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(u[0], 0.7, epsilon = 1e-12);
        assert_relative_eq!(ld, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_samples_equal_raw_normals() {
        let flow = ConditionalFlow::identity(FlowConfig::new(1, 1, 1), 3).unwrap();
        let s = flow.sample(&[0.1, 0.0], 50, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for i in 0..50 {
            let z: f64 = StandardNormal.sample(&mut rng);
            assert_relative_eq!(s[[i, 0]], z, epsilon = 1e-12);
        }
        assert_eq!(s, flow.sample(&[0.1, 0.0], 50, 42).unwrap());
    }

    #[test]
    fn rejects_non_finite_and_bad_dims() {
        let flow = ConditionalFlow::identity(FlowConfig::new(1, 1, 1), 0).unwrap();
        assert!(matches!(
            flow.transform_forward(&[f64::NAN], &[0.0, 0.0]),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            flow.transform_forward(&[0.0], &[0.0]),
            Err(Error::Dimension { .. })
        ));
        let mut params = flow.params.clone();
        params[3] = f64::INFINITY;
        assert!(ConditionalFlow::from_params(flow.config.clone(), params).is_err());
    }

    #[test]
    fn autoregressive_structure() {
        let flow = perturbed(FlowConfig::new(1, 1, 3).with_hidden(&[8, 8]), 5, 0.5);
        let ctx = [0.3, 1.0];
        let (u, _) = flow.transform_inverse(&[0.2, -0.4, 1.1], &ctx).unwrap();
        let (u2, _) = flow.transform_inverse(&[0.2, 0.9, 1.1], &ctx).unwrap();
        assert_eq!(u[0], u2[0]);
        assert_ne!(u[1], u2[1]);
        assert_ne!(u[2], u2[2]);
    }

    #[test]
    fn parameter_gradient_of_log_prob_matches_finite_differences() {
        let flow = perturbed(FlowConfig::new(2, 1, 2).with_bins(4).with_hidden(&[6, 6]), 9, 0.4);
        let ctx = [0.4, -0.3, 1.0];
        let y = [0.8, -1.3];
        let tape = Tape::new();
        let pv = tape.vars(&flow.params);
        let cv: Vec<Var> = ctx.iter().map(|&c| Var::constant(c)).collect();
        let yv: Vec<Var> = y.iter().map(|&c| Var::constant(c)).collect();
        let lp = Conditioned::new(&flow.config, &pv, &cv).log_prob(&yv);
        let g = tape.gradient(lp).wrt_all(&pv);
        drop(tape);
        let mut worst: f64 = 0.0;
        for i in 0..flow.params.len() {
            let h = 1e-5;
            let mut p = flow.params.clone();
            p[i] += h;
            let fp = Conditioned::new(&flow.config, &p, &ctx).log_prob(&y);
            p[i] -= 2.0 * h;
            let fm = Conditioned::new(&flow.config, &p, &ctx).log_prob(&y);
            let fd = (fp - fm) / (2.0 * h);
            if g[i].abs() > 1e-6 || fd.abs() > 1e-6 {
                worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()));
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }
}
