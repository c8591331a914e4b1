use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use confbound::data::{Dataset, TreatmentKind};
use confbound::datagen::{x_averaged_gamma, x_grid, GroundTruth};
use confbound::observational::{Propensity, PropensityModel, Stage1Model};
use confbound::query::{Direction, Functional, QuerySpec};
use confbound::rng::{indexed_seed, sub_seed};
use confbound::sensitivity::{closed_form_msm_bound, QuadratureConfig, SensitivityKind};
use confbound::stage2::{compute_bounds, mixing_probability, train_stage2, Stage2Model};
use confbound::stats;

use crate::commands::dgp_from_truth;
use crate::error::{HarnessError, Result};
use crate::manifest::{GammaChoice, LoadedManifest, OracleAggregate, RunSpec};
use crate::report::{self, BoundRow, EvaluationReport, SeedLog, TraceRow, COVERAGE_TOL_SE};

/// Covariate nodes for x-averaged oracle parameters.
pub const X_AVERAGE_NODES: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub enum PointsSource {
    /// Ground-truth points when available, else the 101-point covariate
    /// grid crossed with the manifest's treatment values.
    Grid,
    /// CSV with columns `x_1..x_d, a`.
    File(PathBuf),
}

/// Loaded inputs of a manifest.
pub struct Experiment {
    pub loaded: LoadedManifest,
    pub data: Dataset,
    pub stage1: Stage1Model,
    pub propensity: PropensityModel,
    pub truth: Option<GroundTruth>,
    pub points: Vec<(Vec<f64>, f64)>,
    /// Index into `truth.points` for each evaluation point.
    pub truth_index: Vec<Option<usize>>,
}

/// Upper and lower stage-2 models for one (run, gamma, a_group, replicate).
pub struct TrainedRun {
    pub run: String,
    pub model: String,
    pub gamma: f64,
    pub gamma_source: String,
    pub a_group: Option<f64>,
    pub replicate: usize,
    pub upper: Stage2Model,
    pub lower: Stage2Model,
}

impl TrainedRun {
    pub fn tag(&self) -> String {
        let a = self.a_group.map(|a| format!("_a{a}")).unwrap_or_default();
        format!("{}_g{}{}_r{}", self.run, self.gamma, a, self.replicate)
    }

    pub fn feasible(&self) -> bool {
        self.upper.feasible && self.lower.feasible
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    run: String,
    model: String,
    gamma: f64,
    gamma_source: String,
    a_group: Option<f64>,
    replicate: usize,
    upper: String,
    lower: String,
}

fn read_points(path: &Path) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let d_x = header.len().saturating_sub(1);
    let want: Vec<String> = (1..=d_x).map(|i| format!("x_{i}")).chain(["a".to_owned()]).collect();
    if header != want || d_x == 0 {
        return Err(HarnessError::manifest(format!(
            "points file {} must have header x_1..x_d,a; got {header:?}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let vals = rec?
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| HarnessError::manifest(format!("points file: {e}")))?;
        out.push((vals[..d_x].to_vec(), vals[d_x]));
    }
    Ok(out)
}

impl Experiment {
    pub fn open(loaded: LoadedManifest, source: &PointsSource) -> Result<Experiment> {
        let m = &loaded.manifest;
        let data = Dataset::read_csv(&loaded.existing(&m.data)?)?;
        let stage1 = Stage1Model::load(&loaded.existing(&m.stage1)?)?;
        let propensity = PropensityModel::load(&loaded.existing(&m.propensity)?)?;
        let truth = match &m.ground_truth {
            Some(p) => Some(GroundTruth::load(&loaded.existing(p)?)?),
            None => None,
        };
        let dim = |expected: usize, got: usize, what: &str| -> Result<()> {
            if expected == got {
                Ok(())
            } else {
                Err(confbound::Error::Dimension {
                    expected,
                    got,
                    context: what.into(),
                }
                .into())
            }
        };
        dim(data.d_x(), stage1.d_x(), "stage-1 covariates vs dataset")?;
        dim(data.d_y(), stage1.d_y(), "stage-1 outcomes vs dataset")?;
        dim(data.d_x(), propensity.d_x(), "propensity covariates vs dataset")?;
        if propensity.kind() != data.treatment_kind() {
            return Err(HarnessError::manifest(
                "propensity model and dataset disagree on the treatment type",
            ));
        }

        let mut points = match source {
            PointsSource::File(p) => read_points(&loaded.input(p))?,
            PointsSource::Grid => match &truth {
                Some(gt) => gt.points.iter().map(|p| (p.x.clone(), p.a)).collect(),
                None => {
                    if data.d_x() != 1 {
                        return Err(HarnessError::manifest(
                            "grid points need a one-dimensional covariate or a ground-truth file",
                        ));
                    }
                    let a_values = match (&m.a_values, data.treatment_kind()) {
                        (Some(a), _) => a.clone(),
                        (None, TreatmentKind::Binary) => vec![0.0, 1.0],
                        (None, TreatmentKind::Continuous) => {
                            return Err(HarnessError::manifest(
                                "continuous treatments need `a_values` for grid points",
                            ))
                        }
                    };
                    a_values
                        .iter()
                        .flat_map(|&a| x_grid().into_iter().map(move |x| (vec![x], a)))
                        .collect()
                }
            },
        };
        if let Some(keep) = &m.a_values {
            points.retain(|(_, a)| keep.contains(a));
        }
        if points.is_empty() {
            return Err(HarnessError::manifest("no evaluation points"));
        }
        for (x, _) in &points {
            dim(data.d_x(), x.len(), "evaluation point covariates")?;
        }
        let truth_index = points
            .iter()
            .map(|(x, a)| {
                truth
                    .as_ref()
                    .and_then(|gt| gt.points.iter().position(|p| &p.x == x && p.a == *a))
            })
            .collect();
        Ok(Experiment {
            loaded,
            data,
            stage1,
            propensity,
            truth,
            points,
            truth_index,
        })
    }

    pub fn seeds(&self) -> SeedLog {
        let root = self.loaded.manifest.seed;
        SeedLog {
            root,
            train: sub_seed(root, "train"),
            eval: sub_seed(root, "eval"),
        }
    }

    fn run_points(&self, run: &RunSpec) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&i| {
                run.a_values
                    .as_ref()
                    .is_none_or(|keep| keep.contains(&self.points[i].1))
            })
            .collect()
    }

    /// Treatment groups of a run: each distinct `a` for per-a runs, else
    /// one group holding every point.
    pub fn groups(&self, run: &RunSpec) -> Vec<(Option<f64>, Vec<usize>)> {
        let idx = self.run_points(run);
        if !run.per_a {
            return vec![(None, idx)];
        }
        let mut groups: Vec<(Option<f64>, Vec<usize>)> = Vec::new();
        for i in idx {
            let a = self.points[i].1;
            match groups.iter_mut().find(|(g, _)| *g == Some(a)) {
                Some((_, v)) => v.push(i),
                None => groups.push((Some(a), vec![i])),
            }
        }
        groups
    }

    /// Sensitivity parameter for a gamma choice within a point group.
    pub fn resolve_gamma(
        &self,
        run: &RunSpec,
        choice: GammaChoice,
        a_group: Option<f64>,
        idx: &[usize],
    ) -> Result<(f64, String)> {
        let kind = run.kind()?;
        let (gamma, source) = match choice {
            GammaChoice::Value(g) => return Ok((g, "value".into())),
            GammaChoice::Oracle { oracle } => (
                match oracle {
                    OracleAggregate::Median => self.median_oracle(kind, idx)?,
                    OracleAggregate::XAverage => {
                        let gt = self
                            .truth
                            .as_ref()
                            .ok_or_else(|| HarnessError::manifest("oracle gamma needs ground truth"))?;
                        let a = a_group.ok_or_else(|| HarnessError::manifest("x_average oracle gamma needs per_a"))?;
                        x_averaged_gamma(dgp_from_truth(gt)?.as_ref(), kind, a, X_AVERAGE_NODES)?
                    }
                },
                oracle.name().to_owned(),
            ),
        };
        if !gamma.is_finite() {
            return Err(HarnessError::manifest(format!(
                "run `{}`: oracle gamma is not finite for model {}",
                run.name,
                kind.label()
            )));
        }
        Ok((gamma, source))
    }

    fn median_oracle(&self, kind: SensitivityKind, idx: &[usize]) -> Result<f64> {
        let gt = self
            .truth
            .as_ref()
            .ok_or_else(|| HarnessError::manifest("oracle gamma needs ground truth"))?;
        let label = kind.label();
        let mut per_x: Vec<(Vec<f64>, f64)> = Vec::new();
        for &i in idx {
            let p = &gt.points[self.truth_index[i]
                .ok_or_else(|| HarnessError::manifest(format!("evaluation point {i} has no ground-truth entry")))?];
            let g = *p
                .oracle_gamma
                .get(label)
                .ok_or_else(|| HarnessError::manifest(format!("ground truth has no oracle value for model {label}")))?;
            match per_x.iter_mut().find(|(x, _)| *x == p.x) {
                Some((_, v)) => *v = v.max(g),
                None => per_x.push((p.x.clone(), g)),
            }
        }
        let vals: Vec<f64> = per_x.into_iter().map(|(_, g)| g).collect();
        // Infinite values sort last, so the median stays finite while
        // fewer than half the covariates are unbounded.
        Ok(stats::median(&vals))
    }

    fn query(&self, run: &RunSpec, direction: Direction) -> Result<QuerySpec> {
        let q = run.query.with_direction(direction)?;
        q.validate_dims(self.stage1.d_y())?;
        Ok(q)
    }

    fn a_key(a_group: Option<f64>) -> String {
        a_group.map(|a| a.to_string()).unwrap_or_else(|| "all".into())
    }

    /// Stage-2 seeds depend on the run, treatment group, direction and
    /// replicate but not on gamma, so a gamma grid shares random numbers.
    fn train_seed(&self, run: &RunSpec, a_group: Option<f64>, direction: Direction, rep: usize) -> u64 {
        let key = format!("{}/{}/{}", run.name, Self::a_key(a_group), direction.name());
        indexed_seed(self.seeds().train, &key, rep as u64)
    }

    fn eval_seed(&self, run: &str, a_group: Option<f64>, rep: usize) -> u64 {
        indexed_seed(
            self.seeds().eval,
            &format!("{run}/{}", Self::a_key(a_group)),
            rep as u64,
        )
    }

    fn run_spec(&self, name: &str) -> Result<&RunSpec> {
        self.loaded
            .manifest
            .runs
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| HarnessError::manifest(format!("no run named `{name}`")))
    }
}

/// Train both directions for every run, gamma, treatment group and
/// replicate of the manifest.
pub fn train_all(exp: &Experiment, progress: &dyn Fn(&str)) -> Result<Vec<TrainedRun>> {
    let m = &exp.loaded.manifest;
    let mut out = Vec::new();
    for run in &m.runs {
        let (q_up, q_lo) = (exp.query(run, Direction::Upper)?, exp.query(run, Direction::Lower)?);
        for (a_group, idx) in exp.groups(run) {
            let pts: Vec<(Vec<f64>, f64)> = idx.iter().map(|&i| exp.points[i].clone()).collect();
            let mut cfg = run.stage2.clone();
            if a_group.is_some() {
                cfg.fixed_a = a_group;
            }
            for &choice in &run.gammas {
                let (gamma, gamma_source) = exp.resolve_gamma(run, choice, a_group, &idx)?;
                let spec = run.spec(gamma)?;
                for rep in 0..m.replicates {
                    let train = |q: &QuerySpec, d: Direction| {
                        train_stage2(
                            &exp.stage1,
                            &exp.propensity,
                            &spec,
                            q,
                            &exp.data,
                            &cfg,
                            &pts,
                            exp.train_seed(run, a_group, d, rep),
                        )
                    };
                    let upper = train(&q_up, Direction::Upper)?;
                    let lower = train(&q_lo, Direction::Lower)?;
                    let t = TrainedRun {
                        run: run.name.clone(),
                        model: run.model.clone(),
                        gamma,
                        gamma_source: gamma_source.clone(),
                        a_group,
                        replicate: rep,
                        upper,
                        lower,
                    };
                    progress(&format!(
                        "trained {} (feasible: upper {}, lower {})",
                        t.tag(),
                        t.upper.feasible,
                        t.lower.feasible
                    ));
                    out.push(t);
                }
            }
        }
    }
    Ok(out)
}

fn stage2_dir(exp: &Experiment) -> PathBuf {
    exp.loaded.output_dir.join("stage2")
}

/// Write stage-2 checkpoints and an index under `<output>/stage2`.
pub fn save_trained(exp: &Experiment, runs: &[TrainedRun]) -> Result<()> {
    let dir = stage2_dir(exp);
    std::fs::create_dir_all(&dir)?;
    let mut index = Vec::new();
    for t in runs {
        let (up, lo) = (format!("{}_upper.json", t.tag()), format!("{}_lower.json", t.tag()));
        t.upper.save(&dir.join(&up))?;
        t.lower.save(&dir.join(&lo))?;
        index.push(IndexEntry {
            run: t.run.clone(),
            model: t.model.clone(),
            gamma: t.gamma,
            gamma_source: t.gamma_source.clone(),
            a_group: t.a_group,
            replicate: t.replicate,
            upper: up,
            lower: lo,
        });
    }
    std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_trained(exp: &Experiment) -> Result<Vec<TrainedRun>> {
    let dir = stage2_dir(exp);
    let index_path = dir.join("index.json");
    if !index_path.is_file() {
        return Err(HarnessError::MissingFile(index_path));
    }
    let index: Vec<IndexEntry> = serde_json::from_str(&std::fs::read_to_string(&index_path)?)?;
    index
        .into_iter()
        .map(|e| {
            exp.run_spec(&e.run)?;
            let load = |f: &str| -> Result<Stage2Model> {
                let p = dir.join(f);
                if !p.is_file() {
                    return Err(HarnessError::MissingFile(p));
                }
                Ok(Stage2Model::load(&p)?)
            };
            Ok(TrainedRun {
                upper: load(&e.upper)?,
                lower: load(&e.lower)?,
                run: e.run,
                model: e.model,
                gamma: e.gamma,
                gamma_source: e.gamma_source,
                a_group: e.a_group,
                replicate: e.replicate,
            })
        })
        .collect()
}

pub fn trace_rows(runs: &[TrainedRun]) -> Vec<TraceRow> {
    let mut out = Vec::new();
    for t in runs {
        for m in [&t.upper, &t.lower] {
            for tr in &m.trace {
                out.push(TraceRow {
                    run: t.run.clone(),
                    model: t.model.clone(),
                    gamma: t.gamma,
                    a_group: t.a_group,
                    replicate: t.replicate,
                    direction: m.direction().name().into(),
                    trace: tr.clone(),
                });
            }
        }
    }
    out
}

/// Bounds at every evaluation point of every trained run, with truth,
/// coverage and the closed-form baseline where available.
pub fn bound_rows(exp: &Experiment, runs: &[TrainedRun], progress: &dyn Fn(&str)) -> Result<Vec<BoundRow>> {
    let m = &exp.loaded.manifest;
    let quad = QuadratureConfig::default();
    let mut rows = Vec::new();
    for t in runs {
        let run = exp.run_spec(&t.run)?;
        let idx = exp
            .groups(run)
            .into_iter()
            .find(|(g, _)| *g == t.a_group)
            .map(|(_, v)| v)
            .unwrap_or_default();
        let pts: Vec<(Vec<f64>, f64)> = idx.iter().map(|&i| exp.points[i].clone()).collect();
        let res = compute_bounds(
            &exp.stage1,
            &t.upper,
            &t.lower,
            &exp.propensity,
            &pts,
            m.eval_k,
            exp.eval_seed(&t.run, t.a_group, t.replicate),
        )?;
        let expectation_index = match t.upper.query.functional {
            Functional::Expectation { index } => Some(index),
            _ => None,
        };
        let closed_form = matches!(t.upper.spec.kind, SensitivityKind::Msm | SensitivityKind::Cmsm)
            && exp.stage1.d_y() == 1
            && expectation_index.is_some();
        for (&i, b) in idx.iter().zip(res) {
            let truth = match (expectation_index, exp.truth_index[i], &exp.truth) {
                (Some(d), Some(ti), Some(gt)) => gt.points[ti].truth.get(d).copied(),
                _ => None,
            };
            let (cf_lower, cf_upper) = if closed_form {
                let pi = mixing_probability(&exp.propensity, &b.x, b.a);
                let cf = |d| closed_form_msm_bound(&exp.stage1, &b.x, b.a, t.gamma, pi, d, &quad);
                (Some(cf(Direction::Lower)?), Some(cf(Direction::Upper)?))
            } else {
                (None, None)
            };
            rows.push(BoundRow {
                run: t.run.clone(),
                model: t.model.clone(),
                gamma: t.gamma,
                gamma_source: t.gamma_source.clone(),
                a_group: t.a_group,
                replicate: t.replicate,
                point: i,
                covered: truth.map(|v| b.covers(v, COVERAGE_TOL_SE)),
                truth,
                x: b.x,
                a: b.a,
                lower: b.lower.value,
                lower_se: b.lower.std_error,
                upper: b.upper.value,
                upper_se: b.upper.std_error,
                plugin: b.plugin.value,
                plugin_se: b.plugin.std_error,
                cf_lower,
                cf_upper,
                d_lower: b.d_lower,
                d_upper: b.d_upper,
            });
        }
        progress(&format!("bounds {}", t.tag()));
    }
    Ok(rows)
}

pub struct EvaluateOptions {
    pub points: PointsSource,
    /// Load stage-2 checkpoints from a previous `train-stage2` instead of
    /// training.
    pub reuse_stage2: bool,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        EvaluateOptions {
            points: PointsSource::Grid,
            reuse_stage2: false,
        }
    }
}

pub struct EvaluationOutput {
    pub report: EvaluationReport,
    pub runs: Vec<TrainedRun>,
    pub output_dir: PathBuf,
}

fn y_scale(exp: &Experiment, runs: &[TrainedRun]) -> f64 {
    let d = match runs.first().map(|t| &t.upper.query.functional) {
        Some(Functional::Expectation { index } | Functional::Quantile { index, .. }) => *index,
        _ => 0,
    };
    exp.stage1.y_std.std[d]
}

/// Train (or load) stage-2 models, compute bounds and write the report,
/// per-point CSV, plot tables, summary table and traces.
pub fn evaluate(manifest: &Path, opts: &EvaluateOptions, progress: &dyn Fn(&str)) -> Result<EvaluationOutput> {
    let exp = Experiment::open(LoadedManifest::load(manifest)?, &opts.points)?;
    let runs = if opts.reuse_stage2 {
        load_trained(&exp)?
    } else {
        let runs = train_all(&exp, progress)?;
        save_trained(&exp, &runs)?;
        runs
    };
    let rows = bound_rows(&exp, &runs, progress)?;
    let feasible = |run: &str, gamma: f64, a: Option<f64>| {
        runs.iter()
            .filter(|t| t.run == run && t.gamma == gamma && t.a_group == a)
            .all(TrainedRun::feasible)
    };
    let summaries = report::summarize(&rows, feasible, y_scale(&exp, &runs));
    let infeasible = runs
        .iter()
        .flat_map(|t| {
            let tag = t.tag();
            [(&t.upper, "upper"), (&t.lower, "lower")]
                .into_iter()
                .filter(|(m, _)| !m.feasible)
                .map(move |(_, d)| format!("{tag}_{d}"))
        })
        .collect();
    let hash = exp.loaded.hash.clone();
    let report = EvaluationReport {
        format_version: report::REPORT_VERSION,
        manifest_id: exp.loaded.manifest.id.clone(),
        manifest_hash: hash.clone(),
        coverage_definition: report::COVERAGE_DEFINITION.into(),
        seeds: exp.seeds(),
        summaries,
        points: rows,
        infeasible,
    };
    let out = exp.loaded.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    report::write_bounds_csv(&out.join("bounds.csv"), &hash, &report.points)?;
    report::write_plot_csv(&out.join("plot_models.csv"), &hash, &report.points, false)?;
    report::write_plot_csv(&out.join("plot_closed_form.csv"), &hash, &report.points, true)?;
    report::write_summary_csv(&out.join("summary.csv"), &hash, &report.summaries)?;
    report::write_traces_csv(&out.join("traces.csv"), &hash, &trace_rows(&runs))?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(EvaluationOutput {
        report,
        runs,
        output_dir: out,
    })
}
