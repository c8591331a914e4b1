use std::path::Path;

use serde::{Deserialize, Serialize};

use confbound::stage2::OuterTrace;
use confbound::stats;

use crate::error::Result;

pub const REPORT_VERSION: u32 = 1;

pub const COVERAGE_DEFINITION: &str = "coverage = fraction of evaluation points whose closed interval \
[lower - 2 se_lower, upper + 2 se_upper] contains the true query value; se is the Monte-Carlo standard \
error of each bound";

/// Monte-Carlo tolerance, in standard errors, used for coverage.
pub const COVERAGE_TOL_SE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedLog {
    pub root: u64,
    pub train: u64,
    pub eval: u64,
}

/// One evaluation point of one trained (run, gamma, replicate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub run: String,
    pub model: String,
    pub gamma: f64,
    pub gamma_source: String,
    /// Treatment value the stage-2 model was trained at, for per-a runs.
    pub a_group: Option<f64>,
    pub replicate: usize,
    pub point: usize,
    pub x: Vec<f64>,
    pub a: f64,
    pub lower: f64,
    pub lower_se: f64,
    pub upper: f64,
    pub upper_se: f64,
    pub plugin: f64,
    pub plugin_se: f64,
    pub truth: Option<f64>,
    pub covered: Option<bool>,
    pub cf_lower: Option<f64>,
    pub cf_upper: Option<f64>,
    pub d_lower: f64,
    pub d_upper: f64,
}

impl BoundRow {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub run: String,
    pub model: String,
    pub gamma: f64,
    pub gamma_source: String,
    pub a_group: Option<f64>,
    pub replicates: usize,
    pub n_points: usize,
    pub coverage: Option<f64>,
    /// Median over all points of all replicates.
    pub median_length_points: f64,
    /// Median over replicates of each replicate's median length.
    pub median_length_runs: f64,
    /// Mean |learned - closed form| over both bounds, in standardised
    /// outcome units; MSM and CMSM expectation runs only.
    pub mean_cf_gap_std: Option<f64>,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub run: String,
    pub model: String,
    pub gamma: f64,
    pub a_group: Option<f64>,
    pub replicate: usize,
    pub direction: String,
    pub trace: OuterTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub manifest_id: String,
    pub manifest_hash: String,
    pub coverage_definition: String,
    pub seeds: SeedLog,
    pub summaries: Vec<ModelSummary>,
    pub points: Vec<BoundRow>,
    /// Labels of stage-2 models that failed the fresh-sample constraint
    /// check.
    pub infeasible: Vec<String>,
}

/// Summaries keyed by (run, gamma, a_group) in first-seen order.
pub fn summarize(
    rows: &[BoundRow],
    feasible: impl Fn(&str, f64, Option<f64>) -> bool,
    y_scale: f64,
) -> Vec<ModelSummary> {
    let mut keys: Vec<(String, f64, Option<f64>)> = Vec::new();
    for r in rows {
        let key = (r.run.clone(), r.gamma, r.a_group);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(run, gamma, a_group)| {
            let group: Vec<&BoundRow> = rows
                .iter()
                .filter(|r| r.run == run && r.gamma == gamma && r.a_group == a_group)
                .collect();
            let lengths: Vec<f64> = group.iter().map(|r| r.length()).collect();
            let reps = group.iter().map(|r| r.replicate).max().unwrap_or(0) + 1;
            let per_rep: Vec<f64> = (0..reps)
                .map(|k| {
                    let l: Vec<f64> = group.iter().filter(|r| r.replicate == k).map(|r| r.length()).collect();
                    stats::median(&l)
                })
                .collect();
            let covered: Vec<bool> = group.iter().filter_map(|r| r.covered).collect();
            let coverage =
                (!covered.is_empty()).then(|| covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64);
            let gaps: Vec<f64> = group
                .iter()
                .filter_map(|r| Some(((r.lower - r.cf_lower?).abs() + (r.upper - r.cf_upper?).abs()) / 2.0 / y_scale))
                .collect();
            ModelSummary {
                model: group[0].model.clone(),
                gamma_source: group[0].gamma_source.clone(),
                replicates: reps,
                n_points: group.len() / reps,
                coverage,
                median_length_points: stats::median(&lengths),
                median_length_runs: stats::median(&per_rep),
                mean_cf_gap_std: (!gaps.is_empty()).then(|| stats::mean(&gaps)),
                feasible: feasible(&run, gamma, a_group),
                run,
                gamma,
                a_group,
            }
        })
        .collect()
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Per-point bounds, one row per (run, gamma, replicate, point).
pub fn write_bounds_csv(path: &Path, hash: &str, rows: &[BoundRow]) -> Result<()> {
    let d_x = rows.first().map_or(0, |r| r.x.len());
    let mut header = strings(&[
        "manifest_hash",
        "run",
        "model",
        "gamma",
        "gamma_source",
        "a_group",
        "replicate",
        "point",
    ]);
    header.extend((0..d_x).map(|j| format!("x{j}")));
    header.extend(strings(&[
        "a",
        "lower",
        "lower_se",
        "upper",
        "upper_se",
        "plugin",
        "plugin_se",
        "truth",
        "covered",
        "cf_lower",
        "cf_upper",
        "d_lower",
        "d_upper",
    ]));
    write_rows(
        path,
        &header,
        rows.iter().map(|r| {
            let mut v = vec![
                hash.to_owned(),
                r.run.clone(),
                r.model.clone(),
                num(r.gamma),
                r.gamma_source.clone(),
                opt(r.a_group),
                r.replicate.to_string(),
                r.point.to_string(),
            ];
            v.extend(r.x.iter().map(|&x| num(x)));
            v.extend([
                num(r.a),
                num(r.lower),
                num(r.lower_se),
                num(r.upper),
                num(r.upper_se),
                num(r.plugin),
                num(r.plugin_se),
                opt(r.truth),
                r.covered.map(|c| c.to_string()).unwrap_or_default(),
                opt(r.cf_lower),
                opt(r.cf_upper),
                num(r.d_lower),
                num(r.d_upper),
            ]);
            v
        }),
    )
}

/// Long-format plot table: first covariate, treatment, gamma, model,
/// bounds, truth and the closed-form baseline where one exists.
pub fn write_plot_csv(path: &Path, hash: &str, rows: &[BoundRow], closed_form_only: bool) -> Result<()> {
    let header = strings(&[
        "manifest_hash",
        "x",
        "a",
        "gamma",
        "model",
        "replicate",
        "q_lower",
        "q_upper",
        "truth",
        "cf_lower",
        "cf_upper",
    ]);
    write_rows(
        path,
        &header,
        rows.iter()
            .filter(|r| !closed_form_only || r.cf_lower.is_some())
            .map(|r| {
                vec![
                    hash.to_owned(),
                    r.x.first().copied().map(num).unwrap_or_default(),
                    num(r.a),
                    num(r.gamma),
                    r.model.clone(),
                    r.replicate.to_string(),
                    num(r.lower),
                    num(r.upper),
                    opt(r.truth),
                    opt(r.cf_lower),
                    opt(r.cf_upper),
                ]
            }),
    )
}

pub fn write_summary_csv(path: &Path, hash: &str, rows: &[ModelSummary]) -> Result<()> {
    let header = strings(&[
        "manifest_hash",
        "run",
        "model",
        "gamma",
        "gamma_source",
        "a_group",
        "replicates",
        "n_points",
        "coverage",
        "median_length_points",
        "median_length_runs",
        "mean_cf_gap_std",
        "feasible",
    ]);
    write_rows(
        path,
        &header,
        rows.iter().map(|s| {
            vec![
                hash.to_owned(),
                s.run.clone(),
                s.model.clone(),
                num(s.gamma),
                s.gamma_source.clone(),
                opt(s.a_group),
                s.replicates.to_string(),
                s.n_points.to_string(),
                opt(s.coverage),
                num(s.median_length_points),
                num(s.median_length_runs),
                opt(s.mean_cf_gap_std),
                s.feasible.to_string(),
            ]
        }),
    )
}

pub fn write_traces_csv(path: &Path, hash: &str, rows: &[TraceRow]) -> Result<()> {
    let header = strings(&[
        "manifest_hash",
        "run",
        "model",
        "gamma",
        "a_group",
        "replicate",
        "direction",
        "iteration",
        "mu",
        "mean_slack",
        "mean_violation",
        "max_violation",
        "mean_objective",
        "max_lambda",
    ]);
    write_rows(
        path,
        &header,
        rows.iter().map(|t| {
            vec![
                hash.to_owned(),
                t.run.clone(),
                t.model.clone(),
                num(t.gamma),
                opt(t.a_group),
                t.replicate.to_string(),
                t.direction.clone(),
                t.trace.iteration.to_string(),
                num(t.trace.mu),
                num(t.trace.mean_slack),
                num(t.trace.mean_violation),
                num(t.trace.max_violation),
                num(t.trace.mean_objective),
                num(t.trace.max_lambda),
            ]
        }),
    )
}
