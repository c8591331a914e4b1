use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::{Real, Tape, Var};
use crate::data::{Dataset, Standardizer, TreatmentKind};
use crate::error::{Error, Result};
use crate::flow::checkpoint::{decode_f64s, encode_f64s, FORMAT_VERSION};
use crate::flow::{ConditionalFlow, Conditioned, FlowCheckpoint, FlowConfig, Mlp};
use crate::optim::Adam;

pub const PROPENSITY_CLAMP: f64 = 1e-3;

/// `P(A = a | x)`: a probability for binary treatments, a density for
/// continuous ones.
pub trait Propensity {
    fn kind(&self) -> TreatmentKind;
    fn prob(&self, x: &[f64], a: f64) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityConfig {
    /// Classifier hidden layers (binary) or flow conditioner layers
    /// (continuous).
    pub hidden: Vec<usize>,
    pub num_bins: usize,
    pub train: TrainConfig,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            hidden: vec![32, 32, 32],
            num_bins: 8,
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub enum PropensityModel {
    Binary {
        net: Mlp,
        params: Vec<f64>,
        x_std: Standardizer,
    },
    Continuous {
        flow: ConditionalFlow,
        x_std: Standardizer,
        a_std: Standardizer,
    },
}

#[derive(Serialize, Deserialize)]
struct PropensityFile {
    format_version: u32,
    kind: TreatmentKind,
    x_standardizer: Standardizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer_sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flow: Option<FlowCheckpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a_standardizer: Option<Standardizer>,
}

fn binary_logits<T: Real>(net: &Mlp, params: &[T], x: &[T]) -> (T, T) {
    let out = net.forward(params, x);
    (out[0], out[1])
}

impl PropensityModel {
    /// Clamped `P(A = 1 | x)` for a binary model.
    pub fn p_treated(&self, x: &[f64]) -> f64 {
        match self {
            PropensityModel::Binary { net, params, x_std } => {
                let (l0, l1) = binary_logits(net, params, &x_std.apply(x));
                let p = 1.0 / (1.0 + (l0 - l1).exp());
                p.clamp(PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)
            }
            PropensityModel::Continuous { .. } => f64::NAN,
        }
    }

    pub fn d_x(&self) -> usize {
        match self {
            PropensityModel::Binary { x_std, .. } | PropensityModel::Continuous { x_std, .. } => x_std.dim(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = match self {
            PropensityModel::Binary { net, params, x_std } => PropensityFile {
                format_version: FORMAT_VERSION,
                kind: TreatmentKind::Binary,
                x_standardizer: x_std.clone(),
                layer_sizes: Some(net.sizes.clone()),
                params: Some(encode_f64s(params)),
                flow: None,
                a_standardizer: None,
            },
            PropensityModel::Continuous { flow, x_std, a_std } => PropensityFile {
                format_version: FORMAT_VERSION,
                kind: TreatmentKind::Continuous,
                x_standardizer: x_std.clone(),
                layer_sizes: None,
                params: None,
                flow: Some(FlowCheckpoint::from_flow(flow)),
                a_standardizer: Some(a_std.clone()),
            },
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PropensityModel> {
        let f: PropensityFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if f.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                f.format_version
            )));
        }
        let missing = |what: &str| Error::Checkpoint(format!("propensity checkpoint missing `{what}`"));
        match f.kind {
            TreatmentKind::Binary => {
                let net = Mlp {
                    sizes: f.layer_sizes.ok_or_else(|| missing("layer_sizes"))?,
                };
                let params = decode_f64s(&f.params.ok_or_else(|| missing("params"))?)?;
                if params.len() != net.param_count() || net.output_dim() != 2 {
                    return Err(Error::Checkpoint("classifier shape mismatch".into()));
                }
                Ok(PropensityModel::Binary {
                    net,
                    params,
                    x_std: f.x_standardizer,
                })
            }
            TreatmentKind::Continuous => Ok(PropensityModel::Continuous {
                flow: f.flow.ok_or_else(|| missing("flow"))?.into_flow()?,
                x_std: f.x_standardizer,
                a_std: f.a_standardizer.ok_or_else(|| missing("a_standardizer"))?,
            }),
        }
    }
}

impl Propensity for PropensityModel {
    fn kind(&self) -> TreatmentKind {
        match self {
            PropensityModel::Binary { .. } => TreatmentKind::Binary,
            PropensityModel::Continuous { .. } => TreatmentKind::Continuous,
        }
    }

    fn prob(&self, x: &[f64], a: f64) -> f64 {
        match self {
            PropensityModel::Binary { .. } => {
                let p = self.p_treated(x);
                if a == 1.0 {
                    p
                } else {
                    1.0 - p
                }
            }
            PropensityModel::Continuous { flow, x_std, a_std } => {
                let z = a_std.apply(&[a]);
                let lp = Conditioned::new(&flow.config, &flow.params, &x_std.apply(x)).log_prob(&z);
                (lp - a_std.log_scale()).exp()
            }
        }
    }
}

fn x_rows(data: &Dataset, x_std: &Standardizer) -> Vec<Vec<f64>> {
    data.x.rows().into_iter().map(|r| x_std.apply(&r.to_vec())).collect()
}

/// Cross-entropy classifier (binary) or conditional density flow
/// (continuous) for the treatment given covariates.
pub fn fit_propensity(data: &Dataset, config: &PropensityConfig) -> Result<PropensityModel> {
    if data.is_empty() {
        return Err(Error::Data("cannot fit a propensity model on an empty dataset".into()));
    }
    let tc = &config.train;
    if tc.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let x_std = Standardizer::fit(&data.x);
    let xs = x_rows(data, &x_std);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    match data.treatment_kind() {
        TreatmentKind::Binary => {
            let treated = data.a.iter().filter(|&&a| a == 1.0).count();
            if treated == 0 || treated == data.len() {
                return Err(Error::Positivity(
                    "all units share one treatment level; propensity is degenerate".into(),
                ));
            }
            let net = Mlp::new(data.d_x(), &config.hidden, 2);
            let mut params = net.init_random(&mut rng);
            let mut adam = Adam::new(tc.adam.clone(), params.len());
            for epoch in 0..tc.epochs {
                order.shuffle(&mut rng);
                adam.set_lr(tc.lr_at(epoch));
                for batch in order.chunks(tc.batch_size) {
                    let tape = Tape::new();
                    let pv = tape.vars(&params);
                    let mut terms = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let x: Vec<Var> = xs[i].iter().map(|&v| Var::constant(v)).collect();
                        let (l0, l1) = binary_logits(&net, &pv, &x);
                        let picked = if data.a[i] == 1.0 { l1 } else { l0 };
                        terms.push(l0.ln_add_exp(l1) - picked);
                    }
                    let loss = Var::sum(&terms) / batch.len() as f64;
                    let grad = tape.gradient(loss).wrt_all(&pv);
                    drop(tape);
                    if !loss.value().is_finite() {
                        return Err(Error::Diverged {
                            step: 0,
                            reason: "non-finite propensity loss".into(),
                        });
                    }
                    adam.step(&mut params, &grad);
                }
            }
            Ok(PropensityModel::Binary { net, params, x_std })
        }
        TreatmentKind::Continuous => {
            let a_mat = Array2::from_shape_vec((data.len(), 1), data.a.clone()).unwrap();
            let a_std = Standardizer::fit(&a_mat);
            let cfg = FlowConfig {
                d_x: data.d_x(),
                d_a: 0,
                d_y: 1,
                num_bins: config.num_bins,
                tail_bound: 10.0,
                hidden: config.hidden.clone(),
            };
            let mut flow = ConditionalFlow::identity(cfg, tc.seed)?;
            let mut adam = Adam::new(tc.adam.clone(), flow.params.len());
            let zs: Vec<f64> = data.a.iter().map(|&a| a_std.apply(&[a])[0]).collect();
            for epoch in 0..tc.epochs {
                order.shuffle(&mut rng);
                adam.set_lr(tc.lr_at(epoch));
                for batch in order.chunks(tc.batch_size) {
                    let tape = Tape::new();
                    let pv = tape.vars(&flow.params);
                    let mut terms = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let x: Vec<Var> = xs[i].iter().map(|&v| Var::constant(v)).collect();
                        terms.push(Conditioned::new(&flow.config, &pv, &x).log_prob(&[Var::constant(zs[i])]));
                    }
                    let loss = Var::sum(&terms) * (-1.0 / batch.len() as f64);
                    let grad = tape.gradient(loss).wrt_all(&pv);
                    drop(tape);
                    if !loss.value().is_finite() {
                        return Err(Error::Diverged {
                            step: 0,
                            reason: "non-finite propensity loss".into(),
                        });
                    }
                    adam.step(&mut flow.params, &grad);
                }
            }
            Ok(PropensityModel::Continuous { flow, x_std, a_std })
        }
    }
}
