use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::data::{Dataset, TreatmentKind};
use crate::error::{Error, Result};
use crate::flow::{std_normal_log_density, ConditionalFlow, Conditioned, FlowCheckpoint, FlowConfig};
use crate::observational::{Propensity, Stage1Model};
use crate::optim::{Adam, AdamConfig};
use crate::query::loss::{unit_objective, UnitSamples};
use crate::query::{Direction, Functional, QuerySpec};
use crate::rng::{indexed_seed, sub_seed};
use crate::sensitivity::constraint::shift_log_ratio;
use crate::sensitivity::rho::{constraint_from_log_ratios, constraint_from_mixed_log_ratios, floored_log_ratio};
use crate::sensitivity::{LatentShiftSample, SensitivitySpec};
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2FlowConfig {
    pub num_bins: usize,
    pub tail_bound: f64,
    pub hidden: Vec<usize>,
}

impl Default for Stage2FlowConfig {
    fn default() -> Self {
        Stage2FlowConfig {
            num_bins: 8,
            tail_bound: 10.0,
            hidden: vec![32, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugLagConfig {
    /// Monte-Carlo latent draws per unit.
    pub k: usize,
    /// Latent draws for the final fresh-sample constraint check.
    pub check_k: usize,
    pub n1: usize,
    pub n2: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate factor applied after each outer iteration. Adam's
    /// step noise otherwise keeps the constraint from settling.
    pub lr_decay: f64,
    pub mu0: f64,
    pub alpha: f64,
    pub eps_constraint: f64,
    /// Quantile bins of the first covariate (and of a continuous treatment)
    /// used to key the multipliers.
    pub lambda_bins: usize,
    pub clip_norm: Option<f64>,
    pub flow: Stage2FlowConfig,
    /// Train on `(x_i, fixed_a)` instead of the observed `(x_i, a_i)`.
    pub fixed_a: Option<f64>,
}

impl Default for AugLagConfig {
    fn default() -> Self {
        AugLagConfig {
            k: 256,
            check_k: 2048,
            n1: 20,
            n2: 100,
            batch_size: 32,
            lr: 5e-3,
            lr_decay: 0.8,
            mu0: 1.0,
            alpha: 2.0,
            eps_constraint: 0.05,
            lambda_bins: 10,
            clip_norm: Some(10.0),
            flow: Stage2FlowConfig::default(),
            fixed_a: None,
        }
    }
}

impl AugLagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2
            || self.check_k < 2
            || self.n1 == 0
            || self.n2 == 0
            || self.batch_size == 0
            || self.lambda_bins == 0
        {
            return Err(Error::config(
                "k, check_k >= 2 and positive n1, n2, batch_size, lambda_bins required",
            ));
        }
        if !(self.mu0 > 0.0)
            || !(self.alpha > 1.0)
            || !(self.lr > 0.0)
            || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0)
            || !(self.eps_constraint >= 0.0)
        {
            return Err(Error::config(
                "need mu0 > 0, alpha > 1, lr > 0, lr_decay in (0, 1], eps_constraint >= 0",
            ));
        }
        Ok(())
    }
}

/// Per outer iteration, measured on fresh samples at the multiplier-key
/// representatives before the multiplier update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterTrace {
    pub iteration: usize,
    pub mu: f64,
    pub mean_slack: f64,
    /// Mean of `max(0, D - gamma)`.
    pub mean_violation: f64,
    pub max_violation: f64,
    pub mean_objective: f64,
    pub max_lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointConstraint {
    pub x: Vec<f64>,
    pub a: f64,
    pub d_hat: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub flow: ConditionalFlow,
    pub spec: SensitivitySpec,
    /// In original outcome units.
    pub query: QuerySpec,
    pub config: AugLagConfig,
    pub seed: u64,
    pub trace: Vec<OuterTrace>,
    pub constraint_values: Vec<PointConstraint>,
    /// Every evaluation point satisfied `D <= tolerance` on a fresh sample.
    pub feasible: bool,
    pub tolerance: f64,
}

/// Acceptance threshold on `D`: `gamma (1 + eps)`, or `eps / 10` when
/// gamma sits at zero (f-models without confounding), where a relative
/// tolerance would demand an exact identity shift.
pub fn constraint_tolerance(gamma: f64, eps: f64) -> f64 {
    if gamma > 0.0 {
        gamma * (1.0 + eps)
    } else {
        eps / 10.0
    }
}

/// Weight of the unshifted latent component: the observed propensity of the
/// arm for binary treatments, zero for continuous ones.
pub fn mixing_probability(prop: &dyn Propensity, x: &[f64], a: f64) -> f64 {
    match prop.kind() {
        TreatmentKind::Binary => prop.prob(x, a),
        TreatmentKind::Continuous => 0.0,
    }
}

struct Unit {
    x: Vec<f64>,
    a: f64,
    ctx: Vec<f64>,
    pi: f64,
    key: usize,
}

/// Objective (oriented, larger is better) and constraint value for one
/// unit. `query` is in standardised outcome units.
fn unit_pass<T: Real>(
    s1: &Conditioned<'_, T>,
    s2: &Conditioned<'_, T>,
    spec: &SensitivitySpec,
    query: Option<&QuerySpec>,
    sample: &LatentShiftSample,
) -> Result<(Option<T>, T)> {
    let pi = sample.pi_mix;
    let mut lr = Vec::with_capacity(sample.len());
    for u in &sample.u {
        lr.push(shift_log_ratio(s2, u).0);
    }
    let Some(query) = query else {
        return Ok((None, constraint_from_log_ratios(spec, &lr, pi)?));
    };
    let need_ll = !matches!(query.functional, Functional::Expectation { .. });
    let mut ys = Vec::with_capacity(sample.len());
    let mut lls = Vec::with_capacity(sample.len());
    // Log ratios at the shifted-component draws, reused by the constraint.
    let mut shifted_lr = Vec::with_capacity(sample.len());
    for (j, (ut, &xi)) in sample.u.iter().zip(&sample.xi).enumerate() {
        let log_base = std_normal_log_density(ut);
        let utv: Vec<T> = ut.iter().map(|&v| T::cst(v)).collect();
        let (u, log_shift) = if xi {
            (utv, lr[j] + log_base)
        } else {
            let (u, ld) = s2.forward(&utv);
            let log_shift = T::cst(log_base) - ld;
            shifted_lr.push(floored_log_ratio(log_shift, std_normal_log_density(&u)));
            (u, log_shift)
        };
        let (y, ld1) = s1.forward(&u);
        if need_ll {
            let log_mix = if pi > 0.0 {
                (std_normal_log_density(&u) + pi.ln()).ln_add_exp(log_shift + (1.0 - pi).ln())
            } else {
                log_shift
            };
            lls.push(log_mix - ld1);
        } else {
            lls.push(T::cst(0.0));
        }
        ys.push(y);
    }
    let (obj, _) = unit_objective(query, &UnitSamples { y: ys, log_lik: lls });
    let d = constraint_from_mixed_log_ratios(spec, &lr, &shifted_lr, pi)?;
    Ok((Some(obj), d))
}

fn constants<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&p| T::cst(p)).collect()
}

/// Fresh-sample constraint value of a second-stage flow at one point.
#[allow(clippy::too_many_arguments)]
pub fn point_constraint(
    stage1: &Stage1Model,
    flow: &ConditionalFlow,
    spec: &SensitivitySpec,
    x: &[f64],
    a: f64,
    pi_mix: f64,
    k: usize,
    seed: u64,
) -> Result<f64> {
    let ctx = stage1.ctx(x, a);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = LatentShiftSample::draw(k, stage1.d_y(), pi_mix, &mut rng)?;
    crate::sensitivity::constraint_estimate(spec, flow, &ctx, &sample)
}

fn bin_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let s = stats::sorted(values);
    (1..bins)
        .map(|b| stats::quantile_sorted(&s, b as f64 / bins as f64))
        .collect()
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|e| *e < v)
}

fn build_units(
    stage1: &Stage1Model,
    prop: &dyn Propensity,
    data: &Dataset,
    cfg: &AugLagConfig,
) -> Result<(Vec<Unit>, usize)> {
    let kind = prop.kind();
    let xs1: Vec<f64> = (0..data.len())
        .map(|i| if data.d_x() > 0 { data.x[[i, 0]] } else { 0.0 })
        .collect();
    let x_edges = bin_edges(&xs1, cfg.lambda_bins);
    let a_vals: Vec<f64> = (0..data.len()).map(|i| cfg.fixed_a.unwrap_or(data.a[i])).collect();
    let (a_edges, a_bins) = match kind {
        TreatmentKind::Binary => (vec![0.5], 2),
        TreatmentKind::Continuous => (bin_edges(&a_vals, cfg.lambda_bins), cfg.lambda_bins),
    };
    let mut units = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let x = data.x_row(i).to_vec();
        let a = a_vals[i];
        let pi = mixing_probability(prop, &x, a);
        if kind == TreatmentKind::Binary && !(pi > 0.0 && pi < 1.0) {
            return Err(Error::Positivity(format!("propensity {pi} at training unit {i}")));
        }
        let key = bin_of(&x_edges, xs1[i]) * a_bins + bin_of(&a_edges, a);
        units.push(Unit {
            ctx: stage1.ctx(&x, a),
            x,
            a,
            pi,
            key,
        });
    }
    Ok((units, (x_edges.len() + 1) * a_bins))
}

/// Augmented-Lagrangian training of the second-stage flow for one
/// (sensitivity spec, query, direction). The objective per inner step is
/// the batch mean of `-obj + psi(s)` with slack `s = gamma - D`, where
/// `psi(s) = -lambda s + mu/2 s^2` while `s < lambda / mu` and
/// `-lambda^2 / (2 mu)` otherwise; after each outer iteration `lambda <- max(0, lambda -
/// mu s)` per key and `mu <- alpha mu`.
///
/// `eval_points` are checked for feasibility on fresh samples at the end;
/// when empty, the multiplier-key representatives are used.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    stage1: &Stage1Model,
    prop: &dyn Propensity,
    spec: &SensitivitySpec,
    query: &QuerySpec,
    data: &Dataset,
    cfg: &AugLagConfig,
    eval_points: &[(Vec<f64>, f64)],
    seed: u64,
) -> Result<Stage2Model> {
    cfg.validate()?;
    query.validate_dims(stage1.d_y())?;
    if data.is_empty() {
        return Err(Error::Data("stage 2 needs training units".into()));
    }
    if data.d_x() != stage1.d_x() || data.d_y() != stage1.d_y() {
        return Err(Error::Dimension {
            expected: stage1.d_x(),
            got: data.d_x(),
            context: "stage-2 training data vs stage-1 model".into(),
        });
    }
    let query_std = query.standardized(&stage1.y_std);
    let (units, n_keys) = build_units(stage1, prop, data, cfg)?;
    let mut reps: Vec<Vec<usize>> = vec![Vec::new(); n_keys];
    for (i, u) in units.iter().enumerate() {
        if reps[u.key].len() < 4 {
            reps[u.key].push(i);
        }
    }
    let rep_units: Vec<usize> = reps.iter().flatten().copied().collect();

    let flow_cfg = FlowConfig {
        d_x: stage1.d_x(),
        d_a: 1,
        d_y: stage1.d_y(),
        num_bins: cfg.flow.num_bins,
        tail_bound: cfg.flow.tail_bound,
        hidden: cfg.flow.hidden.clone(),
    };
    let mut flow = ConditionalFlow::identity(flow_cfg, sub_seed(seed, "stage2-init"))?;
    let s1cfg = stage1.flow.config.clone();
    let s1_params: Vec<Var> = constants(&stage1.flow.params);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
        flow.params.len(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "stage2-train"));
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut lambda = vec![0.0; n_keys];
    let mut mu = cfg.mu0;
    let mut lr = cfg.lr;
    let mut trace = Vec::with_capacity(cfg.n1);
    let d_y = stage1.d_y();
    let mut step = 0;

    for outer in 0..cfg.n1 {
        for _ in 0..cfg.n2 {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(units.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let tape = Tape::new();
            let pv = tape.vars(&flow.params);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let unit = &units[i];
                let sample = LatentShiftSample::draw(cfg.k, d_y, unit.pi, &mut rng)?;
                let ctx: Vec<Var> = constants(&unit.ctx);
                let s1 = Conditioned::new(&s1cfg, &s1_params, &ctx);
                let s2 = Conditioned::new(&flow.config, &pv, &ctx);
                let (obj, d) = unit_pass(&s1, &s2, spec, Some(&query_std), &sample)?;
                let s = Var::constant(spec.gamma) - d;
                let lam = lambda[unit.key];
                // Inequality form: once the slack exceeds lambda / mu the
                // penalty is flat, so slack is never pushed toward zero.
                let penalty = if lam - mu * s.value() > 0.0 {
                    s.square() * (0.5 * mu) - s * lam
                } else {
                    Var::constant(-lam * lam / (2.0 * mu))
                };
                terms.push(-obj.unwrap() + penalty);
            }
            let loss = Var::sum(&terms) * (1.0 / batch.len() as f64);
            let grad = tape.gradient(loss).wrt_all(&pv);
            drop(tape);
            if !loss.value().is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    reason: format!("non-finite objective {} in outer iteration {outer}", loss.value()),
                });
            }
            adam.step(&mut flow.params, &grad);
            step += 1;
        }

        let mut key_slack = vec![Vec::new(); n_keys];
        let mut objs = Vec::with_capacity(rep_units.len());
        let mut violations = Vec::with_capacity(rep_units.len());
        let mut eval_rng = ChaCha8Rng::seed_from_u64(indexed_seed(seed, "stage2-outer", outer as u64));
        for &i in &rep_units {
            let unit = &units[i];
            let sample = LatentShiftSample::draw(cfg.k, d_y, unit.pi, &mut eval_rng)?;
            let s1 = stage1.flow.condition(&unit.ctx)?;
            let s2 = flow.condition(&unit.ctx)?;
            let (obj, d) = unit_pass(&s1, &s2, spec, Some(&query_std), &sample)?;
            key_slack[unit.key].push(spec.gamma - d);
            violations.push((d - spec.gamma).max(0.0));
            objs.push(obj.unwrap());
        }
        let slacks: Vec<f64> = key_slack.iter().flatten().copied().collect();
        for (key, s) in key_slack.iter().enumerate() {
            if !s.is_empty() {
                lambda[key] = (lambda[key] - mu * stats::mean(s)).max(0.0);
            }
        }
        trace.push(OuterTrace {
            iteration: outer,
            mu,
            mean_slack: stats::mean(&slacks),
            mean_violation: stats::mean(&violations),
            max_violation: violations.iter().copied().fold(0.0, f64::max),
            mean_objective: stats::mean(&objs),
            max_lambda: lambda.iter().copied().fold(0.0, f64::max),
        });
        mu *= cfg.alpha;
        lr *= cfg.lr_decay;
        adam.set_lr(lr);
    }

    let points: Vec<(Vec<f64>, f64)> = if eval_points.is_empty() {
        rep_units.iter().map(|&i| (units[i].x.clone(), units[i].a)).collect()
    } else {
        eval_points.to_vec()
    };
    let tolerance = constraint_tolerance(spec.gamma, cfg.eps_constraint);
    let mut constraint_values = Vec::with_capacity(points.len());
    for (j, (x, a)) in points.iter().enumerate() {
        let pi = mixing_probability(prop, x, *a);
        let d_hat = point_constraint(
            stage1,
            &flow,
            spec,
            x,
            *a,
            pi,
            cfg.check_k,
            indexed_seed(seed, "stage2-check", j as u64),
        )?;
        constraint_values.push(PointConstraint {
            x: x.clone(),
            a: *a,
            d_hat,
        });
    }
    let feasible = constraint_values.iter().all(|p| p.d_hat <= tolerance);
    Ok(Stage2Model {
        flow,
        spec: spec.clone(),
        query: query.clone(),
        config: cfg.clone(),
        seed,
        trace,
        constraint_values,
        feasible,
        tolerance,
    })
}

#[derive(Serialize, Deserialize)]
struct Stage2File {
    format_version: u32,
    kind: String,
    flow: FlowCheckpoint,
    spec: SensitivitySpec,
    query: QuerySpec,
    config: AugLagConfig,
    seed: u64,
    trace: Vec<OuterTrace>,
    constraint_values: Vec<PointConstraint>,
    feasible: bool,
    tolerance: f64,
}

impl Stage2Model {
    pub fn direction(&self) -> Direction {
        self.query.direction
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = Stage2File {
            format_version: crate::flow::checkpoint::FORMAT_VERSION,
            kind: "stage2".into(),
            flow: FlowCheckpoint::from_flow(&self.flow),
            spec: self.spec.clone(),
            query: self.query.clone(),
            config: self.config.clone(),
            seed: self.seed,
            trace: self.trace.clone(),
            constraint_values: self.constraint_values.clone(),
            feasible: self.feasible,
            tolerance: self.tolerance,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Stage2Model> {
        let f: Stage2File = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if f.kind != "stage2" {
            return Err(Error::Checkpoint(format!(
                "expected a stage2 checkpoint, found `{}`",
                f.kind
            )));
        }
        Ok(Stage2Model {
            flow: f.flow.into_flow()?,
            spec: f.spec,
            query: f.query,
            config: f.config,
            seed: f.seed,
            trace: f.trace,
            constraint_values: f.constraint_values,
            feasible: f.feasible,
            tolerance: f.tolerance,
        })
    }
}
