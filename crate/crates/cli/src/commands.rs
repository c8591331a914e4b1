//! Subcommand bodies, independent of argument parsing.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use confbound::data::{Dataset, TreatmentKind};
use confbound::datagen::{
    oracle_gamma, x_averaged_gamma, x_grid, BinaryMsmDgp, BinaryMsmDgpConfig, ContinuousDgp, ContinuousDgpConfig, Dgp,
    GroundTruth, SemiSyntheticConfig, SemiSyntheticDgp, TwoOutcomeDgp, TwoOutcomeDgpConfig,
};
use confbound::observational::{
    fit_propensity, fit_stage1, PropensityConfig, PropensityModel, Stage1Config, Stage1Model,
};
use confbound::query::Direction;
use confbound::rng::sub_seed;
use confbound::sensitivity::{closed_form_msm_bound, QuadratureConfig, SensitivityKind};
use confbound::stage2::mixing_probability;

use crate::error::{HarnessError, Result};
use crate::manifest::LoadedManifest;
use crate::pipeline::{self, Experiment, PointsSource, X_AVERAGE_NODES};
use crate::report;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DgpName {
    Binary,
    Continuous,
    SemiSynthetic,
    TwoOutcome,
}

impl DgpName {
    pub fn parse(s: &str) -> Result<DgpName> {
        match s {
            "binary" => Ok(DgpName::Binary),
            "continuous" => Ok(DgpName::Continuous),
            "semisynthetic" => Ok(DgpName::SemiSynthetic),
            "two-outcome" | "two_outcome" => Ok(DgpName::TwoOutcome),
            other => Err(HarnessError::manifest(format!("unknown dgp `{other}`"))),
        }
    }
}

/// `generate-data` configuration. `dgp` holds the process parameters
/// (`n`, `gamma`, `seed`, ...); the rest controls evaluation points.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub dgp: serde_json::Value,
    /// Treatment values of the evaluation grid; `[0, 1]` for binary
    /// processes, `[0.1, 0.5, 0.9]` for the continuous one.
    pub a_values: Option<Vec<f64>>,
    /// Semi-synthetic only: held-out rows drawn for evaluation.
    pub test_n: Option<usize>,
    /// Semi-synthetic only: keep test rows with propensity in this range.
    pub pi_range: Option<[f64; 2]>,
    /// Semi-synthetic only: covariate CSV (header row, numeric columns)
    /// to resample instead of the built-in generator.
    pub covariates: Option<PathBuf>,
}

fn parse_cfg<T: serde::de::DeserializeOwned + Default>(v: &serde_json::Value) -> Result<T> {
    if v.is_null() {
        Ok(T::default())
    } else {
        Ok(serde_json::from_value(v.clone())?)
    }
}

fn read_covariates(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let d = r.headers()?.len();
    let mut vals = Vec::new();
    for rec in r.records() {
        for s in rec?.iter() {
            vals.push(
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| HarnessError::manifest(format!("covariates: {e}")))?,
            );
        }
    }
    if d == 0 || vals.len() % d != 0 {
        return Err(HarnessError::manifest("covariate table is ragged or empty"));
    }
    Ok(Array2::from_shape_vec((vals.len() / d, d), vals).expect("shape checked"))
}

/// Build a process from its name and parameter JSON (the `dgp` section
/// of a generate config), returning it with its sample size and seed.
pub fn build_dgp(
    name: DgpName,
    cfg: &serde_json::Value,
    covariates: Option<&Path>,
) -> Result<(Box<dyn Dgp>, usize, u64)> {
    Ok(match name {
        DgpName::Binary => {
            let c: BinaryMsmDgpConfig = parse_cfg(cfg)?;
            (Box::new(BinaryMsmDgp::new(c.gamma)?), c.n, c.seed)
        }
        DgpName::Continuous => {
            let c: ContinuousDgpConfig = parse_cfg(cfg)?;
            (Box::new(ContinuousDgp::new(c.gamma)?), c.n, c.seed)
        }
        DgpName::TwoOutcome => {
            let c: TwoOutcomeDgpConfig = parse_cfg(cfg)?;
            (Box::new(TwoOutcomeDgp::new(c.gamma)?), c.n, c.seed)
        }
        DgpName::SemiSynthetic => {
            let c: SemiSyntheticConfig = parse_cfg(cfg)?;
            let (n, seed) = (c.n, c.seed);
            let mut d = SemiSyntheticDgp::new(c)?;
            if let Some(p) = covariates {
                d = d.with_covariates(read_covariates(p)?)?;
            }
            (Box::new(d), n, seed)
        }
    })
}

/// Rebuild the process recorded in a ground-truth file.
pub fn dgp_from_truth(gt: &GroundTruth) -> Result<Box<dyn Dgp>> {
    let cfg: GenerateConfig = serde_json::from_value(gt.config.clone())?;
    Ok(build_dgp(DgpName::parse(&gt.dgp)?, &cfg.dgp, cfg.covariates.as_deref())?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub dataset: PathBuf,
    pub ground_truth: PathBuf,
    pub rows: usize,
    pub points: usize,
}

/// Sample the observational dataset and compute ground truth at the
/// evaluation points. Writes `dataset.csv` and `ground_truth.json`.
pub fn generate_data(name: DgpName, config: &GenerateConfig, out: &Path) -> Result<GenerateSummary> {
    let (dgp, n, seed) = build_dgp(name, &config.dgp, config.covariates.as_deref())?;
    let data = dgp.sample(n, sub_seed(seed, "data"))?;
    let points: Vec<(Vec<f64>, f64)> = match name {
        DgpName::SemiSynthetic => {
            let test = dgp.sample(config.test_n.unwrap_or(2000), sub_seed(seed, "test"))?;
            let [lo, hi] = config.pi_range.unwrap_or([0.3, 0.7]);
            let mut pts = Vec::new();
            for i in 0..test.len() {
                let x = test.x_row(i).to_vec();
                let p = dgp.prob(&x, 1.0);
                if (lo..=hi).contains(&p) {
                    pts.push((x.clone(), 0.0));
                    pts.push((x, 1.0));
                }
            }
            pts
        }
        _ => {
            let default = match dgp.kind() {
                TreatmentKind::Binary => vec![0.0, 1.0],
                TreatmentKind::Continuous => vec![0.1, 0.5, 0.9],
            };
            let a_values = config.a_values.clone().unwrap_or(default);
            a_values
                .iter()
                .flat_map(|&a| x_grid().into_iter().map(move |x| (vec![x], a)))
                .collect()
        }
    };
    let mut recorded = config.clone();
    recorded.dgp = match name {
        DgpName::Binary => serde_json::to_value(parse_cfg::<BinaryMsmDgpConfig>(&config.dgp)?)?,
        DgpName::Continuous => serde_json::to_value(parse_cfg::<ContinuousDgpConfig>(&config.dgp)?)?,
        DgpName::TwoOutcome => serde_json::to_value(parse_cfg::<TwoOutcomeDgpConfig>(&config.dgp)?)?,
        DgpName::SemiSynthetic => serde_json::to_value(parse_cfg::<SemiSyntheticConfig>(&config.dgp)?)?,
    };
    if let Some(c) = &recorded.covariates {
        recorded.covariates = Some(std::path::absolute(c)?);
    }
    let gt = GroundTruth::compute(dgp.as_ref(), serde_json::to_value(&recorded)?, &points)?;
    std::fs::create_dir_all(out)?;
    let summary = GenerateSummary {
        dataset: out.join("dataset.csv"),
        ground_truth: out.join("ground_truth.json"),
        rows: data.len(),
        points: points.len(),
    };
    data.write_csv(&summary.dataset)?;
    gt.save(&summary.ground_truth)?;
    Ok(summary)
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) if !p.is_file() => Err(HarnessError::MissingFile(p.to_owned())),
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
    }
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(HarnessError::MissingFile(path.to_owned()));
    }
    Ok(Dataset::read_csv(path)?)
}

pub fn train_stage1(data: &Path, config: Option<&Path>, out: &Path) -> Result<Stage1Model> {
    let data = read_dataset(data)?;
    let cfg: Stage1Config = read_json(config)?;
    let model = fit_stage1(&data, &cfg)?;
    model.save(out)?;
    Ok(model)
}

pub fn train_propensity(data: &Path, config: Option<&Path>, out: &Path) -> Result<PropensityModel> {
    let data = read_dataset(data)?;
    let cfg: PropensityConfig = read_json(config)?;
    let model = fit_propensity(&data, &cfg)?;
    model.save(out)?;
    Ok(model)
}

/// Train every stage-2 model of a manifest and write checkpoints plus
/// `traces.csv`.
pub fn train_stage2(manifest: &Path, progress: &dyn Fn(&str)) -> Result<Vec<pipeline::TrainedRun>> {
    let exp = Experiment::open(LoadedManifest::load(manifest)?, &PointsSource::Grid)?;
    let runs = pipeline::train_all(&exp, progress)?;
    pipeline::save_trained(&exp, &runs)?;
    std::fs::create_dir_all(&exp.loaded.output_dir)?;
    report::write_traces_csv(
        &exp.loaded.output_dir.join("traces.csv"),
        &exp.loaded.hash,
        &pipeline::trace_rows(&runs),
    )?;
    Ok(runs)
}

/// Bounds from previously trained stage-2 checkpoints: `bounds.csv` and
/// `bounds.json`.
pub fn bounds(manifest: &Path, points: &PointsSource, progress: &dyn Fn(&str)) -> Result<Vec<report::BoundRow>> {
    let exp = Experiment::open(LoadedManifest::load(manifest)?, points)?;
    let runs = pipeline::load_trained(&exp)?;
    let rows = pipeline::bound_rows(&exp, &runs, progress)?;
    let out = &exp.loaded.output_dir;
    std::fs::create_dir_all(out)?;
    report::write_bounds_csv(&out.join("bounds.csv"), &exp.loaded.hash, &rows)?;
    std::fs::write(out.join("bounds.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}

/// Points for commands without a manifest: a CSV, or the covariate grid
/// crossed with `a_values`.
pub fn standalone_points(points: &PointsSource, a_values: &[f64]) -> Result<Vec<(Vec<f64>, f64)>> {
    match points {
        PointsSource::File(p) => {
            let mut r = csv::Reader::from_path(p)?;
            let d = r.headers()?.len().saturating_sub(1);
            let mut out = Vec::new();
            for rec in r.records() {
                let v = rec?
                    .iter()
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<f64>, _>>()
                    .map_err(|e| HarnessError::manifest(format!("points file: {e}")))?;
                out.push((v[..d].to_vec(), v[d]));
            }
            Ok(out)
        }
        PointsSource::Grid => Ok(a_values
            .iter()
            .flat_map(|&a| x_grid().into_iter().map(move |x| (vec![x], a)))
            .collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedFormRow {
    pub x: Vec<f64>,
    pub a: f64,
    pub gamma: f64,
    pub pi: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Sharp MSM (binary, with a propensity model) or CMSM (continuous, no
/// propensity) expectation bounds from a stage-1 checkpoint.
pub fn closed_form(
    stage1: &Stage1Model,
    propensity: Option<&PropensityModel>,
    gammas: &[f64],
    points: &[(Vec<f64>, f64)],
) -> Result<Vec<ClosedFormRow>> {
    let quad = QuadratureConfig::default();
    let mut out = Vec::new();
    for &gamma in gammas {
        for (x, a) in points {
            let pi = propensity.map_or(0.0, |p| mixing_probability(p, x, *a));
            out.push(ClosedFormRow {
                x: x.clone(),
                a: *a,
                gamma,
                pi,
                lower: closed_form_msm_bound(stage1, x, *a, gamma, pi, Direction::Lower, &quad)?,
                upper: closed_form_msm_bound(stage1, x, *a, gamma, pi, Direction::Upper, &quad)?,
            });
        }
    }
    Ok(out)
}

pub fn write_closed_form_csv(path: &Path, rows: &[ClosedFormRow]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.x.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
    header.extend(["a", "gamma", "pi", "lower", "upper"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
        rec.extend([r.a, r.gamma, r.pi, r.lower, r.upper].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleRow {
    pub model: String,
    /// `point`, `x_average` or `median`.
    pub aggregate: String,
    pub x: Option<Vec<f64>>,
    pub a: Option<f64>,
    pub gamma: f64,
}

/// Oracle parameters per grid point, the x-average per treatment value
/// (one-dimensional covariates) and the median of per-x maxima over arms.
pub fn oracle_table(dgp: &dyn Dgp, models: &[SensitivityKind], points: &[(Vec<f64>, f64)]) -> Result<Vec<OracleRow>> {
    let mut out = Vec::new();
    let mut a_values: Vec<f64> = Vec::new();
    for (_, a) in points {
        if !a_values.contains(a) {
            a_values.push(*a);
        }
    }
    for &kind in models {
        let mut per_x: Vec<(Vec<f64>, f64)> = Vec::new();
        for (x, a) in points {
            let g = oracle_gamma(&dgp.latent(x, *a)?, kind)?;
            out.push(OracleRow {
                model: kind.label().into(),
                aggregate: "point".into(),
                x: Some(x.clone()),
                a: Some(*a),
                gamma: g,
            });
            match per_x.iter_mut().find(|(px, _)| px == x) {
                Some((_, v)) => *v = v.max(g),
                None => per_x.push((x.clone(), g)),
            }
        }
        if dgp.d_x() == 1 {
            for &a in &a_values {
                out.push(OracleRow {
                    model: kind.label().into(),
                    aggregate: "x_average".into(),
                    x: None,
                    a: Some(a),
                    gamma: x_averaged_gamma(dgp, kind, a, X_AVERAGE_NODES)?,
                });
            }
        }
        let vals: Vec<f64> = per_x.into_iter().map(|(_, g)| g).collect();
        out.push(OracleRow {
            model: kind.label().into(),
            aggregate: "median".into(),
            x: None,
            a: None,
            gamma: confbound::stats::median(&vals),
        });
    }
    Ok(out)
}

pub fn write_oracle_csv(path: &Path, rows: &[OracleRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "aggregate", "x", "a", "gamma"])?;
    for r in rows {
        let x =
            r.x.as_ref()
                .map(|x| x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "))
                .unwrap_or_default();
        w.write_record([
            r.model.clone(),
            r.aggregate.clone(),
            x,
            r.a.map(|a| a.to_string()).unwrap_or_default(),
            r.gamma.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
