//! Command-line surface for the federated prognostics library.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fedprog::baselines::CflConfig;
use fedprog::cmapss;
use fedprog::error::{Error, Result};
use fedprog::fed::{run_federated, FedSettings};
use fedprog::harness::{self, ExperimentSpec, HyperGrids, ScenarioKind};
use fedprog::report::{emit_report, Method};
use fedprog::sev::{predict_quantile, ClientDataset, ClientParams};
use fedprog::simgen;

#[derive(Parser)]
#[command(name = "fedprog", version, about = "Personalized federated failure-time prognostics")]
struct Cli {
    /// Structured TOML config (fed/cfl/grids/methods sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Number of replications.
    #[arg(long, global = true, default_value_t = 20)]
    reps: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a simulation-study experiment and write its report.
    Simulate {
        #[command(subcommand)]
        which: SimCmd,
    },
    /// Run the turbofan case study from a 26-column run-to-failure file.
    CaseStudy {
        #[arg(long)]
        data: PathBuf,
        /// Optional failure-mode label CSV (unit_id, fm); clustered when absent.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Fit the personalized federated model on per-client unit CSVs.
    Fit {
        /// One CSV per client (unit_id, y_log, ttf, feature_c_hat).
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
    },
    /// Predict median failure times from a fitted model.
    Predict {
        /// Model JSON produced by `fit`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Client whose parameters to use.
        #[arg(long)]
        client: String,
    },
}

#[derive(Subcommand)]
enum SimCmd {
    /// Ten clients, 50 train / 50 test units each.
    Study1 {
        /// Coefficient dispersion (heterogeneity level).
        #[arg(long)]
        sigma: f64,
    },
    /// Twenty-client sample-size scenarios.
    Study2 {
        #[arg(value_enum)]
        variant: Study2Variant,
        /// Training units per client (balanced variant only).
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Study2Variant {
    Balanced,
    Imbalanced,
    ThreeClient,
}

/// TOML config file contents; every section is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    fed: Option<FedSettings>,
    cfl: Option<CflConfig>,
    grids: Option<GridsConfig>,
    methods: Option<Vec<String>>,
    max_loocv_folds: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridsConfig {
    lambda: Vec<f64>,
    alpha: Vec<f64>,
    theta: Vec<f64>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    names
        .iter()
        .map(|n| match n.as_str() {
            "PFL" => Ok(Method::Pfl),
            "CFL" => Ok(Method::Cfl),
            "Local" => Ok(Method::Local),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected PFL, CFL, or Local)"
            ))),
        })
        .collect()
}

fn apply_config(spec: &mut ExperimentSpec, cfg: &FileConfig) -> Result<()> {
    if let Some(fed) = &cfg.fed {
        spec.fed = fed.clone();
    }
    if let Some(cfl) = &cfg.cfl {
        spec.cfl = cfl.clone();
    }
    if let Some(g) = &cfg.grids {
        spec.grids = HyperGrids {
            lambda: g.lambda.clone(),
            alpha: g.alpha.clone(),
            theta: g.theta.clone(),
        };
    }
    if let Some(m) = &cfg.methods {
        spec.methods = parse_methods(m)?;
    }
    if let Some(f) = cfg.max_loocv_folds {
        spec.max_loocv_folds = f;
    }
    Ok(())
}

/// Serialized model: per-client parameters on the natural scale.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    version: String,
    seed: u64,
    lambda: f64,
    alpha: f64,
    theta: f64,
    clients: Vec<ModelClient>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelClient {
    client_id: String,
    beta: Vec<f64>,
    sigma: f64,
}

fn run(cli: Cli) -> Result<()> {
    if cli.reps == 0 {
        return Err(Error::Config("--reps must be at least 1".into()));
    }
    let cfg = load_config(cli.config.as_deref())?;

    match cli.cmd {
        Cmd::Simulate { which } => {
            let scenario = match which {
                SimCmd::Study1 { sigma } => {
                    if !(sigma > 0.0) {
                        return Err(Error::Config(format!("--sigma must be positive, got {sigma}")));
                    }
                    ScenarioKind::Study1 { sigma }
                }
                SimCmd::Study2 { variant, n } => match variant {
                    Study2Variant::Balanced => {
                        if n == 0 {
                            return Err(Error::Config("--n must be at least 1".into()));
                        }
                        ScenarioKind::Study2Balanced { n_per_client: n }
                    }
                    Study2Variant::Imbalanced => ScenarioKind::Study2Imbalanced,
                    Study2Variant::ThreeClient => ScenarioKind::Study2ThreeClient,
                },
            };
            let mut spec = ExperimentSpec::new(scenario, cli.seed);
            spec.replications = cli.reps;
            apply_config(&mut spec, &cfg)?;
            let report = harness::run_experiment(&spec)?;
            emit_report(&report, &cli.out)?;
            eprintln!(
                "wrote {} and {}",
                cli.out.join("raw_mape.csv").display(),
                cli.out.join("summary.json").display()
            );
        }
        Cmd::CaseStudy { data, labels } => {
            let units = cmapss::parse_cmapss(&data)?;
            let fm = match labels {
                Some(p) => cmapss::read_labels(&p, &units)?,
                None => cmapss::cluster_failure_modes(&units)?,
            };
            let features = cmapss::compute_case_features(&units, &fm)?;
            let mut spec = ExperimentSpec::new(ScenarioKind::Study2ThreeClient, cli.seed);
            spec.replications = cli.reps;
            apply_config(&mut spec, &cfg)?;
            let report = harness::run_case_experiment(&features, &spec)?;
            emit_report(&report, &cli.out)?;

            // feature CSVs for the first replication's split
            let split = cmapss::build_case_split(&features, fedprog::seeds::stream(cli.seed, "case-rep", 0))?;
            let fdir = cli.out.join("features");
            std::fs::create_dir_all(&fdir)?;
            for client in &split {
                cmapss::dump_case_features_csv(client, &fdir.join(format!("{}.csv", client.id)))?;
            }
        }
        Cmd::Fit { data } => {
            let mut datasets = Vec::new();
            for path in &data {
                let records = simgen::load_units_csv(path)?;
                let id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::Config(format!("bad data path {}", path.display())))?;
                datasets.push(simgen::dataset_from_records(id, &records)?);
            }
            let fed = cfg.fed.clone().unwrap_or_default();
            let (lambda, alpha, theta) = match &cfg.grids {
                Some(g) => harness::loocv_select(
                    &datasets,
                    &HyperGrids {
                        lambda: g.lambda.clone(),
                        alpha: g.alpha.clone(),
                        theta: g.theta.clone(),
                    },
                    &fed,
                    cfg.max_loocv_folds.unwrap_or(20),
                    cli.seed,
                )?,
                None => (fed.lambda, fed.alpha, fed.theta),
            };
            let mut settings = fed;
            settings.lambda = lambda;
            settings.alpha = alpha;
            settings.theta = theta;
            let fed_cfg = settings.build(cli.seed)?;
            let fit = run_federated(&datasets, &fed_cfg)?;
            let model = ModelFile {
                version: env!("CARGO_PKG_VERSION").into(),
                seed: cli.seed,
                lambda,
                alpha,
                theta,
                clients: datasets
                    .iter()
                    .zip(&fit.params)
                    .map(|(d, p)| ModelClient {
                        client_id: d.client_id.clone(),
                        beta: p.beta.iter().copied().collect(),
                        sigma: p.sigma,
                    })
                    .collect(),
            };
            std::fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("model.json");
            std::fs::write(&path, serde_json::to_string_pretty(&model)?)?;
            eprintln!("wrote {}", path.display());
        }
        Cmd::Predict { model, data, client } => {
            let model: ModelFile = serde_json::from_str(&std::fs::read_to_string(&model)?)?;
            let mc = model
                .clients
                .iter()
                .find(|c| c.client_id == client)
                .ok_or_else(|| Error::Config(format!("model has no client `{client}`")))?;
            let params = ClientParams::new(nalgebra::DVector::from_vec(mc.beta.clone()), mc.sigma)?;
            let records = simgen::load_units_csv(&data)?;
            let dataset: ClientDataset = simgen::dataset_from_records(&client, &records)?;

            std::fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("predictions.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["unit_id", "pred_ttf_median"])?;
            for (j, rec) in records.iter().enumerate() {
                let x = nalgebra::DVector::from_iterator(
                    dataset.p(),
                    dataset.features.row(j).iter().copied(),
                );
                let pred = predict_quantile(&params, &x, 0.5)?.exp();
                w.write_record([rec.unit_id.clone(), format!("{pred}")])?;
            }
            w.flush()?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // single machine-readable error line on stderr
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
