use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;

/// Fully connected ReLU network with a linear output layer.
///
/// Parameters are one flat slice: per layer, the row-major weight matrix
/// (`out x in`) followed by the bias vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Mlp {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Mlp { sizes }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn forward<T: Real>(&self, params: &[T], input: &[T]) -> Vec<T> {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(input.len(), self.input_dim());
        let layers = self.sizes.len() - 1;
        let mut h = input.to_vec();
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let bias_off = off + n_in * n_out;
            let mut next = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &params[off + o * n_in..off + (o + 1) * n_in];
                let z = T::affine(row, &h, params[bias_off + o]);
                next.push(if l + 1 < layers { z.relu() } else { z });
            }
            off = bias_off + n_out;
            h = next;
        }
        h
    }

    /// He-normal hidden weights, zero output weights, output bias as given
    /// (zeros when `None`). The network initially emits `output_bias` for
    /// every input.
    pub fn init<R: Rng>(&self, rng: &mut R, output_bias: Option<&[f64]>) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut params = Vec::with_capacity(self.param_count());
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            if l + 1 < layers {
                let normal = Normal::new(0.0, (2.0 / n_in.max(1) as f64).sqrt()).unwrap();
                params.extend((0..n_in * n_out).map(|_| normal.sample(rng)));
                params.extend(std::iter::repeat_n(0.0, n_out));
            } else {
                params.extend(std::iter::repeat_n(0.0, n_in * n_out));
                match output_bias {
                    Some(b) => params.extend_from_slice(b),
                    None => params.extend(std::iter::repeat_n(0.0, n_out)),
                }
            }
        }
        params
    }

    /// Like [`Mlp::init`] but with a small random output layer, for networks
    /// that must not start at a constant (classifiers).
    pub fn init_random<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.param_count());
        for w in self.sizes.windows(2) {
            let normal = Normal::new(0.0, (2.0 / w[0].max(1) as f64).sqrt()).unwrap();
            params.extend((0..w[0] * w[1]).map(|_| normal.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        params
    }
}
