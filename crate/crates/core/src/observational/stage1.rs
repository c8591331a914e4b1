use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainMeta};
use crate::autodiff::{Real, Tape, Var};
use crate::data::{context_matrix, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::flow::{ConditionalFlow, Conditioned, FlowCheckpoint, FlowConfig};
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub num_bins: usize,
    pub tail_bound: f64,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            num_bins: 8,
            tail_bound: 10.0,
            hidden: vec![32, 32],
            train: TrainConfig::default(),
        }
    }
}

/// Frozen observational flow `y = f*(u; x, a)`, working internally on
/// standardised context and outcomes.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub flow: ConditionalFlow,
    pub ctx_std: Standardizer,
    pub y_std: Standardizer,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct Stage1File {
    format_version: u32,
    kind: String,
    flow: FlowCheckpoint,
    ctx_standardizer: Standardizer,
    y_standardizer: Standardizer,
    meta: TrainMeta,
}

impl Stage1Model {
    pub fn d_x(&self) -> usize {
        self.flow.config.d_x
    }

    pub fn d_y(&self) -> usize {
        self.flow.config.d_y
    }

    /// Standardised conditioning vector for `(x, a)`.
    pub fn ctx(&self, x: &[f64], a: f64) -> Vec<f64> {
        let mut raw = x.to_vec();
        raw.push(a);
        self.ctx_std.apply(&raw)
    }

    /// Log density of `y` (original units) given `(x, a)`.
    pub fn log_prob(&self, y: &[f64], x: &[f64], a: f64) -> Result<f64> {
        let lp = self.flow.log_prob(&self.y_std.apply(y), &self.ctx(x, a))?;
        Ok(lp - self.y_std.log_scale())
    }

    /// Outcome (original units) for latent `u`.
    pub fn push(&self, u: &[f64], x: &[f64], a: f64) -> Result<Vec<f64>> {
        let (z, _) = self.flow.transform_forward(u, &self.ctx(x, a))?;
        Ok(self.y_std.invert(&z))
    }

    pub fn sample(&self, x: &[f64], a: f64, count: usize, seed: u64) -> Result<Array2<f64>> {
        let mut s = self.flow.sample(&self.ctx(x, a), count, seed)?;
        for mut row in s.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.y_std.std[j] + self.y_std.mean[j];
            }
        }
        Ok(s)
    }

    /// Mean held-out log-likelihood in original units.
    pub fn mean_log_lik(&self, data: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..data.len() {
            let x = data.x_row(i).to_vec();
            let y = data.y_row(i).to_vec();
            total += self.log_prob(&y, &x, data.a[i])?;
        }
        Ok(total / data.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = Stage1File {
            format_version: crate::flow::checkpoint::FORMAT_VERSION,
            kind: "stage1".into(),
            flow: FlowCheckpoint::from_flow(&self.flow),
            ctx_standardizer: self.ctx_std.clone(),
            y_standardizer: self.y_std.clone(),
            meta: self.meta.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Stage1Model> {
        let file: Stage1File = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.kind != "stage1" {
            return Err(Error::Checkpoint(format!(
                "expected a stage1 checkpoint, found `{}`",
                file.kind
            )));
        }
        let flow = file.flow.into_flow()?;
        if file.ctx_standardizer.dim() != flow.config.d_ctx() || file.y_standardizer.dim() != flow.config.d_y {
            return Err(Error::Checkpoint("standardizer dimensions do not match flow".into()));
        }
        Ok(Stage1Model {
            flow,
            ctx_std: file.ctx_standardizer,
            y_std: file.y_standardizer,
            meta: file.meta,
        })
    }
}

fn standardized_rows(data: &Dataset, ctx_std: &Standardizer, y_std: &Standardizer) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let ctx = context_matrix(data);
    let c = ctx
        .rows()
        .into_iter()
        .map(|r| ctx_std.apply(r.as_slice().unwrap()))
        .collect();
    let y = data.y.rows().into_iter().map(|r| y_std.apply(&r.to_vec())).collect();
    (c, y)
}

fn batch_nll(cfg: &FlowConfig, params: &[f64], ctx: &[Vec<f64>], ys: &[Vec<f64>], idx: &[usize]) -> f64 {
    let total: f64 = idx
        .iter()
        .map(|&i| Conditioned::new(cfg, params, &ctx[i]).log_prob(&ys[i]))
        .sum();
    -total / idx.len() as f64
}

/// Maximum-likelihood fit of the conditional outcome flow with Adam.
pub fn fit_stage1(data: &Dataset, config: &Stage1Config) -> Result<Stage1Model> {
    if data.is_empty() {
        return Err(Error::Data("cannot fit stage 1 on an empty dataset".into()));
    }
    let tc = &config.train;
    if tc.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let flow_cfg = FlowConfig {
        d_x: data.d_x(),
        d_a: 1,
        d_y: data.d_y(),
        num_bins: config.num_bins,
        tail_bound: config.tail_bound,
        hidden: config.hidden.clone(),
    };
    let mut flow = ConditionalFlow::identity(flow_cfg, tc.seed)?;

    let (train, val) = if tc.val_frac > 0.0 && data.len() >= 20 {
        let (v, t) = data.split(tc.val_frac, tc.seed ^ 0x5eed);
        (t, Some(v))
    } else {
        (data.clone(), None)
    };
    let ctx_std = Standardizer::fit(&context_matrix(&train));
    let y_std = Standardizer::fit(&train.y);
    let (ctx, ys) = standardized_rows(&train, &ctx_std, &y_std);

    let cfg = flow.config.clone();
    let mut adam = Adam::new(tc.adam.clone(), flow.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut meta = TrainMeta {
        epochs: tc.epochs,
        seed: tc.seed,
        ..TrainMeta::default()
    };

    'epochs: for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        adam.set_lr(tc.lr_at(epoch));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(tc.batch_size) {
            let tape = Tape::new();
            let pv = tape.vars(&flow.params);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let c: Vec<Var> = ctx[i].iter().map(|&v| Var::constant(v)).collect();
                let y: Vec<Var> = ys[i].iter().map(|&v| Var::constant(v)).collect();
                terms.push(Conditioned::new(&cfg, &pv, &c).log_prob(&y));
            }
            let loss = Var::sum(&terms) * (-1.0 / batch.len() as f64);
            let grad = tape.gradient(loss).wrt_all(&pv);
            drop(tape);
            if !loss.value().is_finite() || grad.iter().any(|g| !g.is_finite()) {
                meta.diverged = Some(format!(
                    "non-finite loss or gradient at epoch {epoch}, step {}",
                    meta.steps
                ));
                break 'epochs;
            }
            let before = flow.params.clone();
            adam.step(&mut flow.params, &grad);
            if flow.params.iter().any(|p| !p.is_finite()) {
                flow.params = before;
                meta.diverged = Some(format!("non-finite parameters after step {}", meta.steps));
                break 'epochs;
            }
            meta.steps += 1;
            epoch_loss += loss.value();
            batches += 1;
        }
        meta.epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }

    let all: Vec<usize> = (0..train.len()).collect();
    meta.final_loss = Some(batch_nll(&cfg, &flow.params, &ctx, &ys, &all) + y_std.log_scale());
    let mut model = Stage1Model {
        flow,
        ctx_std,
        y_std,
        meta,
    };
    if let Some(v) = val {
        model.meta.val_loss = Some(-model.mean_log_lik(&v)?);
    }
    Ok(model)
}
