use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use confbound::datagen::GroundTruth;
use confbound::observational::{PropensityModel, Stage1Model};
use confbound::sensitivity::SensitivityKind;
use confbound_cli::commands::{self, DgpName, GenerateConfig};
use confbound_cli::error::{HarnessError, Result};
use confbound_cli::pipeline::{self, EvaluateOptions, PointsSource};

#[derive(Parser)]
#[command(
    name = "confbound",
    version,
    about = "Bounds on causal queries under unobserved confounding"
)]
struct Cli {
    /// Suppress progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset and its ground truth.
    GenerateData {
        /// binary, continuous, semisynthetic or two-outcome.
        #[arg(long)]
        dgp: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the observational outcome flow.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the propensity model.
    TrainPropensity {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the stage-2 models listed in a manifest.
    TrainStage2 {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Bounds from trained stage-2 checkpoints.
    Bounds {
        #[arg(long)]
        manifest: PathBuf,
        /// `grid` or a CSV path with columns x_1..x_d,a.
        #[arg(long, default_value = "grid")]
        points: String,
    },
    /// Closed-form MSM (or CMSM without --propensity) expectation bounds.
    ClosedForm {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        propensity: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        gamma: Vec<f64>,
        #[arg(long, default_value = "grid")]
        points: String,
        /// Treatment values for grid points.
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        a: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle sensitivity parameters of a synthetic process.
    OracleGamma {
        #[arg(long)]
        dgp: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model labels; defaults to every model valid for the process.
        #[arg(long, value_delimiter = ',')]
        spec: Vec<String>,
        /// Ground-truth file whose points to use instead of the grid.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, bound and score every run of a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "grid")]
        points: String,
        /// Reuse checkpoints from `train-stage2`.
        #[arg(long)]
        reuse_stage2: bool,
    },
}

fn points_source(s: &str) -> PointsSource {
    if s == "grid" {
        PointsSource::Grid
    } else {
        PointsSource::File(PathBuf::from(s))
    }
}

fn read_generate_config(path: Option<&PathBuf>) -> Result<GenerateConfig> {
    match path {
        None => Ok(GenerateConfig::default()),
        Some(p) if !p.is_file() => Err(HarnessError::MissingFile(p.clone())),
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    let progress = move |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    match cli.command {
        Command::GenerateData { dgp, config, out } => {
            let cfg = read_generate_config(config.as_ref())?;
            print_json(&commands::generate_data(DgpName::parse(&dgp)?, &cfg, &out)?)
        }
        Command::TrainStage1 { data, config, out } => {
            let m = commands::train_stage1(&data, config.as_deref(), &out)?;
            print_json(&m.meta)
        }
        Command::TrainPropensity { data, config, out } => {
            commands::train_propensity(&data, config.as_deref(), &out)?;
            print_json(&serde_json::json!({ "checkpoint": out }))
        }
        Command::TrainStage2 { manifest } => {
            let runs = commands::train_stage2(&manifest, &progress)?;
            let bad: Vec<String> = runs.iter().filter(|t| !t.feasible()).map(|t| t.tag()).collect();
            if bad.is_empty() {
                Ok(())
            } else {
                Err(HarnessError::Infeasible(bad))
            }
        }
        Command::Bounds { manifest, points } => {
            commands::bounds(&manifest, &points_source(&points), &progress)?;
            Ok(())
        }
        Command::ClosedForm {
            stage1,
            propensity,
            gamma,
            points,
            a,
            out,
        } => {
            let s1 = Stage1Model::load(&stage1)?;
            let prop = propensity.map(|p| PropensityModel::load(&p)).transpose()?;
            let pts = commands::standalone_points(&points_source(&points), &a)?;
            let rows = commands::closed_form(&s1, prop.as_ref(), &gamma, &pts)?;
            commands::write_closed_form_csv(&out, &rows)
        }
        Command::OracleGamma {
            dgp,
            config,
            spec,
            ground_truth,
            out,
        } => {
            let cfg = read_generate_config(config.as_ref())?;
            let (process, _, _) = commands::build_dgp(DgpName::parse(&dgp)?, &cfg.dgp, cfg.covariates.as_deref())?;
            let models = if spec.is_empty() {
                process.models()
            } else {
                spec.iter()
                    .map(|s| SensitivityKind::from_label(s))
                    .collect::<confbound::Result<Vec<_>>>()?
            };
            let pts = match ground_truth {
                Some(p) => GroundTruth::load(&p)?.points.into_iter().map(|p| (p.x, p.a)).collect(),
                None => {
                    let a = cfg.a_values.clone().unwrap_or_else(|| match process.kind() {
                        confbound::data::TreatmentKind::Binary => vec![0.0, 1.0],
                        confbound::data::TreatmentKind::Continuous => vec![0.1, 0.5, 0.9],
                    });
                    if process.d_x() != 1 {
                        return Err(HarnessError::manifest(
                            "grid points need a one-dimensional covariate; pass --ground-truth",
                        ));
                    }
                    commands::standalone_points(&PointsSource::Grid, &a)?
                }
            };
            commands::write_oracle_csv(&out, &commands::oracle_table(process.as_ref(), &models, &pts)?)
        }
        Command::Evaluate {
            manifest,
            points,
            reuse_stage2,
        } => {
            let opts = EvaluateOptions {
                points: points_source(&points),
                reuse_stage2,
            };
            let out = pipeline::evaluate(&manifest, &opts, &progress)?;
            print_json(&out.report.summaries)?;
            if out.report.infeasible.is_empty() {
                Ok(())
            } else {
                Err(HarnessError::Infeasible(out.report.infeasible))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let v = serde_json::json!({
                "error": { "kind": "usage", "message": e.to_string().trim_end(), "exit_code": 2 }
            });
            eprintln!("{v}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
