use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use confbound::query::{Direction, QuerySpec};
use confbound::sensitivity::{SensitivityKind, SensitivitySpec, WeightExpr};
use confbound::stage2::AugLagConfig;

use crate::error::{HarnessError, Result};

pub const MANIFEST_VERSION: u32 = 1;
/// Overrides the directory relative output paths are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "CONFBOUND_OUTPUT_ROOT";

fn default_eval_k() -> usize {
    2000
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub format_version: u32,
    pub id: String,
    /// Observational dataset CSV used for stage-2 training units.
    pub data: PathBuf,
    /// Ground-truth JSON from `generate-data`; supplies evaluation points,
    /// true query values and oracle parameters.
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    pub stage1: PathBuf,
    pub propensity: PathBuf,
    /// Keep only evaluation points with these treatment values.
    #[serde(default)]
    pub a_values: Option<Vec<f64>>,
    pub runs: Vec<RunSpec>,
    pub seed: u64,
    /// Monte-Carlo draws per evaluation point.
    #[serde(default = "default_eval_k")]
    pub eval_k: usize,
    /// Independent stage-2 trainings per (run, gamma).
    #[serde(default = "one")]
    pub replicates: usize,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    /// Sensitivity model label: msm, cmsm, kl, tv, he, chi2, rosenbaum, wmsm.
    pub model: String,
    /// Weight expression in `pi` for the weighted MSM.
    #[serde(default)]
    pub weight: Option<String>,
    pub gammas: Vec<GammaChoice>,
    #[serde(default)]
    pub query: QueryTemplate,
    #[serde(default)]
    pub stage2: AugLagConfig,
    /// Train one stage-2 model per treatment value with `a` held fixed.
    #[serde(default)]
    pub per_a: bool,
    /// Restrict this run to evaluation points with these treatment values.
    #[serde(default)]
    pub a_values: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaChoice {
    Value(f64),
    Oracle { oracle: OracleAggregate },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleAggregate {
    /// Median over evaluation covariates of the larger per-arm value.
    Median,
    /// Average over a uniform covariate at the run's treatment value.
    XAverage,
}

impl OracleAggregate {
    pub fn name(self) -> &'static str {
        match self {
            OracleAggregate::Median => "oracle_median",
            OracleAggregate::XAverage => "oracle_x_average",
        }
    }
}

/// A query as in [`QuerySpec`] JSON but without a direction; both
/// directions are trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryTemplate(serde_json::Map<String, serde_json::Value>);

impl Default for QueryTemplate {
    fn default() -> Self {
        let mut m = serde_json::Map::new();
        m.insert("type".into(), "expectation".into());
        QueryTemplate(m)
    }
}

impl QueryTemplate {
    pub fn with_direction(&self, direction: Direction) -> Result<QuerySpec> {
        let mut m = self.0.clone();
        m.insert("direction".into(), serde_json::to_value(direction)?);
        Ok(serde_json::from_value(serde_json::Value::Object(m))?)
    }
}

impl RunSpec {
    pub fn kind(&self) -> Result<SensitivityKind> {
        Ok(SensitivityKind::from_label(&self.model)?)
    }

    pub fn spec(&self, gamma: f64) -> Result<SensitivitySpec> {
        let mut spec = SensitivitySpec::new(self.kind()?, gamma)?;
        if let Some(w) = &self.weight {
            if spec.kind != SensitivityKind::WeightedMsm {
                return Err(HarnessError::manifest(format!(
                    "run `{}`: `weight` needs model wmsm",
                    self.name
                )));
            }
            spec = spec.with_weight(WeightExpr::parse(w)?);
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug)]
pub struct LoadedManifest {
    pub manifest: ExperimentManifest,
    /// Lower-case hex SHA-256 of the manifest file bytes.
    pub hash: String,
    pub base_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl LoadedManifest {
    pub fn load(path: &Path) -> Result<LoadedManifest> {
        if !path.is_file() {
            return Err(HarnessError::MissingFile(path.to_owned()));
        }
        let bytes = std::fs::read(path)?;
        let manifest: ExperimentManifest = serde_json::from_slice(&bytes)?;
        let base_dir = path.parent().map(Path::to_owned).unwrap_or_default();
        let output_root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        let output_dir = resolve_output(&base_dir, output_root.as_deref(), &manifest.output_dir);
        let loaded = LoadedManifest {
            manifest,
            hash: hex::encode(Sha256::digest(&bytes)),
            base_dir,
            output_dir,
        };
        loaded.validate()?;
        Ok(loaded)
    }

    /// Input path resolved against the manifest's directory.
    pub fn input(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Resolved input path that must exist.
    pub fn existing(&self, p: &Path) -> Result<PathBuf> {
        let full = self.input(p);
        if full.is_file() {
            Ok(full)
        } else {
            Err(HarnessError::MissingFile(full))
        }
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.format_version != MANIFEST_VERSION {
            return Err(HarnessError::manifest(format!(
                "format_version {} is not supported (expected {MANIFEST_VERSION})",
                m.format_version
            )));
        }
        if m.runs.is_empty() {
            return Err(HarnessError::manifest("no runs"));
        }
        if m.replicates == 0 {
            return Err(HarnessError::manifest("replicates must be >= 1"));
        }
        let mut names = BTreeSet::new();
        for run in &m.runs {
            let safe = !run.name.is_empty()
                && run
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !safe {
                return Err(HarnessError::manifest(format!(
                    "run name `{}` must be non-empty ASCII letters, digits, `-` or `_`",
                    run.name
                )));
            }
            if !names.insert(run.name.as_str()) {
                return Err(HarnessError::manifest(format!("duplicate run name `{}`", run.name)));
            }
            if run.gammas.is_empty() {
                return Err(HarnessError::manifest(format!("run `{}` has no gammas", run.name)));
            }
            run.kind()?;
            run.stage2.validate()?;
            run.query.with_direction(Direction::Upper)?;
            for g in &run.gammas {
                match g {
                    GammaChoice::Value(v) => {
                        run.spec(*v)?;
                    }
                    GammaChoice::Oracle { oracle } => {
                        if m.ground_truth.is_none() {
                            return Err(HarnessError::manifest(format!(
                                "run `{}`: oracle gamma needs `ground_truth`",
                                run.name
                            )));
                        }
                        if *oracle == OracleAggregate::XAverage && !run.per_a {
                            return Err(HarnessError::manifest(format!(
                                "run `{}`: x_average oracle gamma needs per_a",
                                run.name
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn resolve_output(base: &Path, root: Option<&Path>, out: &Path) -> PathBuf {
    if out.is_absolute() {
        out.to_owned()
    } else if let Some(r) = root {
        r.join(out)
    } else {
        base.join(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> serde_json::Value {
        serde_json::json!({
            "format_version": 1,
            "id": "t",
            "data": "data.csv",
            "ground_truth": "gt.json",
            "stage1": "s1.json",
            "propensity": "p.json",
            "runs": [
                {"name": "msm", "model": "msm", "gammas": [1.0, 2.0, {"oracle": "median"}]},
                {"name": "q", "model": "kl", "gammas": [0.5], "query": {"type": "quantile", "level": 0.9}}
            ],
            "seed": 3,
            "output_dir": "out"
        })
    }

    fn write(dir: &Path, v: &serde_json::Value) -> PathBuf {
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
        p
    }

    #[test]
    fn parses_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &sample());
        let m = LoadedManifest::load(&p).unwrap();
        assert_eq!(
            m.manifest.runs[0].gammas[2],
            GammaChoice::Oracle {
                oracle: OracleAggregate::Median
            }
        );
        assert_eq!(m.manifest.eval_k, 2000);
        assert_eq!(m.input(Path::new("data.csv")), dir.path().join("data.csv"));
        assert_eq!(m.hash.len(), 64);
        let q = m.manifest.runs[1].query.with_direction(Direction::Lower).unwrap();
        assert_eq!(q.direction, Direction::Lower);
        assert!(matches!(
            m.existing(Path::new("data.csv")),
            Err(HarnessError::MissingFile(_))
        ));
    }

    #[test]
    fn output_root_override() {
        let base = Path::new("/m");
        assert_eq!(resolve_output(base, None, Path::new("out")), Path::new("/m/out"));
        assert_eq!(
            resolve_output(base, Some(Path::new("/r")), Path::new("out")),
            Path::new("/r/out")
        );
        assert_eq!(
            resolve_output(base, Some(Path::new("/r")), Path::new("/abs")),
            Path::new("/abs")
        );
    }

    #[test]
    fn rejects_bad_manifests() {
        let dir = tempfile::tempdir().unwrap();
        type Edit = Box<dyn Fn(&mut serde_json::Value)>;
        let cases: Vec<Edit> = vec![
            Box::new(|v| v["format_version"] = 9.into()),
            Box::new(|v| v["runs"][1]["name"] = "msm".into()),
            Box::new(|v| v["runs"][0]["name"] = "a/b".into()),
            Box::new(|v| v["runs"][0]["model"] = "nope".into()),
            Box::new(|v| v["runs"][0]["gammas"] = serde_json::json!([0.5])),
            Box::new(|v| v["runs"][0]["gammas"] = serde_json::json!([{"oracle": "x_average"}])),
            Box::new(|v| v["runs"][1]["query"] = serde_json::json!({"type": "quantile"})),
            Box::new(|v| v["bogus"] = 1.into()),
        ];
        for (i, edit) in cases.iter().enumerate() {
            let mut v = sample();
            edit(&mut v);
            let p = write(dir.path(), &v);
            assert!(LoadedManifest::load(&p).is_err(), "case {i} accepted");
        }
    }
}
