//! Experiment orchestration: hyperparameter selection by leave-one-out
//! cross-validation, seeded replications over regenerated scenarios, and
//! method training/evaluation for the simulation studies and the case
//! study.

use std::time::Instant;

use nalgebra::DVector;

use crate::baselines::{self, CflConfig};
use crate::cmapss::{self, CaseClient, CaseUnitFeatures};
use crate::error::{Error, Result};
use crate::fed::{run_federated, FedSettings};
use crate::report::{ChosenHypers, ExperimentReport, MapeSample, Method};
use crate::seeds;
use crate::sev::{predict_quantile, ClientDataset, ClientParams};
use crate::simgen::{self, SimClient};
use crate::similarity::SimilarityKernel;

/// Candidate values searched by cross-validation.
#[derive(Debug, Clone)]
pub struct HyperGrids {
    pub lambda: Vec<f64>,
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
}

impl Default for HyperGrids {
    fn default() -> Self {
        Self {
            lambda: vec![0.01, 0.1, 1.0, 10.0],
            alpha: vec![0.001, 0.005, 0.01, 0.05],
            theta: vec![0.5, 1.0, 5.0, 10.0],
        }
    }
}

impl HyperGrids {
    pub fn single(lambda: f64, alpha: f64, theta: f64) -> Self {
        Self {
            lambda: vec![lambda],
            alpha: vec![alpha],
            theta: vec![theta],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_empty() || self.alpha.is_empty() || self.theta.is_empty() {
            return Err(Error::Config("hyperparameter grids must be nonempty".into()));
        }
        Ok(())
    }

    fn is_single(&self) -> bool {
        self.lambda.len() == 1 && self.alpha.len() == 1 && self.theta.len() == 1
    }
}

/// Which simulated federation an experiment runs on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScenarioKind {
    Study1 { sigma: f64 },
    Study2Balanced { n_per_client: usize },
    Study2Imbalanced,
    Study2ThreeClient,
}

/// Full description of one simulation experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub scenario: ScenarioKind,
    pub methods: Vec<Method>,
    pub replications: usize,
    pub grids: HyperGrids,
    pub seed: u64,
    /// Cap on leave-one-out folds per grid point (cost control).
    pub max_loocv_folds: usize,
    pub fed: FedSettings,
    pub cfl: CflConfig,
}

impl ExperimentSpec {
    pub fn new(scenario: ScenarioKind, seed: u64) -> Self {
        Self {
            scenario,
            methods: vec![Method::Pfl, Method::Cfl, Method::Local],
            replications: 20,
            grids: HyperGrids::default(),
            seed,
            max_loocv_folds: 20,
            fed: FedSettings {
                // strong-shrinkage grid points approach consensus slowly;
                // experiments give them room to converge
                max_iter: 3000,
                ..FedSettings::default()
            },
            cfl: CflConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method set must be nonempty".into()));
        }
        self.grids.validate()?;
        self.cfl.validate()
    }
}

pub fn build_clients(kind: ScenarioKind, seed: u64) -> Result<Vec<SimClient>> {
    match kind {
        ScenarioKind::Study1 { sigma } => simgen::build_study1(sigma, seed),
        ScenarioKind::Study2Balanced { n_per_client } => simgen::build_study2_balanced(n_per_client, seed),
        ScenarioKind::Study2Imbalanced => simgen::build_study2_imbalanced(seed),
        ScenarioKind::Study2ThreeClient => simgen::build_study2_three_client(seed),
    }
}

/// Median failure-time prediction on the positive scale.
pub fn predict_median_ttf(params: &ClientParams, x: &DVector<f64>) -> Result<f64> {
    Ok(predict_quantile(params, x, 0.5)?.exp())
}

fn feasible(alpha: f64, theta: f64, m: usize) -> bool {
    // nonnegative self-weight: 2 alpha (m-1) A'(0) <= 1, A'(0) = 1/theta
    m <= 1 || 2.0 * alpha * (m as f64 - 1.0) / theta <= 1.0 + 1e-12
}

/// Cross-validated hyperparameter choice for the personalized federated
/// method: hold out one training unit per client at a time, fit on the
/// remainder, and score held-out failure-time MAPE. Selection follows the
/// one-standard-error rule: the most strongly coupled point whose score is
/// within one standard error of the minimum.
pub fn loocv_select(
    datasets: &[ClientDataset],
    grids: &HyperGrids,
    fed_base: &FedSettings,
    max_folds: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    grids.validate()?;
    let m = datasets.len();
    if datasets.iter().any(|d| d.n() < 2) {
        return Err(Error::InvalidDataset("cross-validation needs at least 2 units per client".into()));
    }

    let mut points = Vec::new();
    for &theta in &grids.theta {
        for &alpha in &grids.alpha {
            if feasible(alpha, theta, m) {
                for &lambda in &grids.lambda {
                    points.push((lambda, alpha, theta));
                }
            } else {
                log::info!(
                    "excluding infeasible grid point alpha={alpha}, theta={theta}: \
                     max feasible alpha = {}",
                    theta / (2.0 * (m as f64 - 1.0))
                );
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Config(format!(
            "every (alpha, theta) grid point violates 2*alpha*(m-1)/theta <= 1 for m = {m}; \
             largest alpha bound on the grid is {}",
            grids.theta.iter().cloned().fold(f64::MIN, f64::max) / (2.0 * (m as f64 - 1.0))
        )));
    }
    if grids.is_single() && points.len() == 1 {
        return Ok(points[0]);
    }

    let max_n = datasets.iter().map(|d| d.n()).max().unwrap();
    let folds = max_n.min(max_folds).max(1);

    let mut running_best = f64::INFINITY;
    let mut scored: Vec<(f64, f64, (f64, f64, f64))> = Vec::new();
    for &(lambda, alpha, theta) in &points {
        let mut settings = fed_base.clone();
        settings.lambda = lambda;
        settings.alpha = alpha;
        settings.theta = theta;
        settings.kernel = "neg_exp".into();

        let mut err_sum = 0.0;
        let mut err_sq = 0.0;
        let mut err_n = 0usize;
        let mut usable = true;
        'folds: for f in 0..folds {
            let mut reduced = Vec::with_capacity(m);
            let mut held: Vec<(usize, DVector<f64>, f64)> = Vec::new();
            for (i, d) in datasets.iter().enumerate() {
                let h = f % d.n();
                let keep: Vec<usize> = (0..d.n()).filter(|&j| j != h).collect();
                let mut x = nalgebra::DMatrix::zeros(keep.len(), d.p());
                let mut y = DVector::zeros(keep.len());
                for (r, &j) in keep.iter().enumerate() {
                    x.row_mut(r).copy_from(&d.features.row(j));
                    y[r] = d.responses[j];
                }
                reduced.push(ClientDataset::new(d.client_id.clone(), x, y)?);
                held.push((
                    i,
                    DVector::from_iterator(d.p(), d.features.row(h).iter().copied()),
                    d.responses[h],
                ));
            }
            let cfg = settings.build(seeds::stream(seed, "loocv-fold", f as u64))?;
            let run = match run_federated(&reduced, &cfg) {
                Ok(run) => run,
                Err(e) => {
                    log::info!(
                        "dropping grid point lambda={lambda}, alpha={alpha}, theta={theta}: \
                         federated training failed on fold {f}: {e}"
                    );
                    usable = false;
                    break 'folds;
                }
            };
            for (i, x, y_held) in &held {
                let pred = predict_median_ttf(&run.params[*i], x)?;
                let ape = baselines::mape(pred, y_held.exp())?;
                if !ape.is_finite() {
                    usable = false;
                    break 'folds;
                }
                err_sum += ape;
                err_sq += ape * ape;
                err_n += 1;
            }
            // clearly dominated points need not finish their folds
            if err_sum / err_n as f64 > 10.0 * running_best.max(1.0) {
                usable = false;
                break 'folds;
            }
        }
        if !usable {
            continue;
        }
        let n = err_n as f64;
        let score = err_sum / n;
        let se = if err_n > 1 {
            (((err_sq - err_sum * err_sum / n) / (n - 1.0)).max(0.0) / n).sqrt()
        } else {
            0.0
        };
        running_best = running_best.min(score);
        scored.push((score, se, (lambda, alpha, theta)));
    }
    if scored.is_empty() {
        return Err(Error::Config(
            "no usable hyperparameter grid point: federated training failed or scored \
             non-finite at every candidate"
                .into(),
        ));
    }
    // one-standard-error rule: among points whose score is within one
    // standard error of the best, prefer the strongest coupling (largest
    // lambda, then smallest alpha, then smallest theta)
    let (best_score, best_se, _) = scored
        .iter()
        .cloned()
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .unwrap();
    let cutoff = best_score + best_se;
    let chosen = scored
        .iter()
        .filter(|(s, _, _)| *s <= cutoff + 1e-12)
        .max_by(|a, b| {
            let ka = (a.2 .0, -a.2 .1, -a.2 .2);
            let kb = (b.2 .0, -b.2 .1, -b.2 .2);
            ka.partial_cmp(&kb).unwrap()
        })
        .unwrap();
    Ok(chosen.2)
}

/// Fitted per-client parameters for one method.
fn train_method(
    method: Method,
    datasets: &[ClientDataset],
    hypers: (f64, f64, f64),
    spec_fed: &FedSettings,
    spec_cfl: &CflConfig,
    rep_seed: u64,
) -> Result<Vec<ClientParams>> {
    match method {
        Method::Pfl => {
            let mut settings = spec_fed.clone();
            settings.lambda = hypers.0;
            settings.alpha = hypers.1;
            settings.theta = hypers.2;
            settings.kernel = "neg_exp".into();
            let cfg = settings.build(seeds::stream(rep_seed, "pfl", 0))?;
            Ok(run_federated(datasets, &cfg)?.params)
        }
        Method::Cfl => {
            let mut cfg = spec_cfl.clone();
            cfg.seed = seeds::stream(rep_seed, "cfl", 0);
            let fit = baselines::cfl_train(datasets, &cfg)?;
            Ok(vec![fit.params; datasets.len()])
        }
        Method::Local => datasets
            .iter()
            .map(|d| Ok(baselines::local_mle(d)?.params))
            .collect(),
    }
}

/// Run one full simulation experiment: per replication, regenerate the
/// scenario, select hyperparameters, train every method, and score each
/// client's test MAPE against the noise-free median failure times.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let t0 = Instant::now();
    let mut samples = Vec::new();
    let mut hyperparameters = Vec::new();
    let mut failures = Vec::new();

    for r in 0..spec.replications {
        let rep_seed = seeds::stream(spec.seed, "rep", r as u64);
        match run_replication(spec, r, rep_seed) {
            Ok((mut s, h)) => {
                samples.append(&mut s);
                hyperparameters.push(h);
            }
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failures.push(format!("replication {r}: {e}"));
            }
        }
    }
    ExperimentReport::assemble(
        spec.seed,
        spec.replications,
        samples,
        hyperparameters,
        failures,
        t0.elapsed().as_secs_f64(),
    )
}

fn run_replication(
    spec: &ExperimentSpec,
    r: usize,
    rep_seed: u64,
) -> Result<(Vec<MapeSample>, ChosenHypers)> {
    let clients = build_clients(spec.scenario, rep_seed)?;
    let datasets: Vec<ClientDataset> = clients.iter().map(|c| c.train_dataset()).collect::<Result<_>>()?;

    let hypers = select_hypers(spec, &datasets, rep_seed)?;
    let chosen = ChosenHypers {
        replication: r,
        lambda: hypers.0,
        alpha: hypers.1,
        theta: hypers.2,
    };

    let mut samples = Vec::new();
    for &method in &spec.methods {
        let params = train_method(method, &datasets, hypers, &spec.fed, &spec.cfl, rep_seed)?;
        for (i, client) in clients.iter().enumerate() {
            let x = client.test_features()?;
            let truth = client.test_truth_median_ttf();
            let mut pairs = Vec::with_capacity(truth.len());
            for (j, &t) in truth.iter().enumerate() {
                let xv = DVector::from_iterator(x.ncols(), x.row(j).iter().copied());
                pairs.push((predict_median_ttf(&params[i], &xv)?, t));
            }
            samples.push(MapeSample {
                method,
                client_id: client.id.clone(),
                replication: r,
                mape_pct: baselines::mean_mape(&pairs)?,
            });
        }
    }
    Ok((samples, chosen))
}

fn select_hypers(spec: &ExperimentSpec, datasets: &[ClientDataset], rep_seed: u64) -> Result<(f64, f64, f64)> {
    let needs_search = spec.methods.contains(&Method::Pfl);
    if !needs_search {
        // hyperparameters are PFL-only; record the grid's first point
        return Ok((spec.grids.lambda[0], spec.grids.alpha[0], spec.grids.theta[0]));
    }
    loocv_select(
        datasets,
        &spec.grids,
        &spec.fed,
        spec.max_loocv_folds,
        seeds::stream(rep_seed, "loocv", 0),
    )
}

/// Case-study experiment: replications re-draw the train/test split from
/// precomputed per-unit features; errors are relative remaining-life errors
/// in percent.
pub fn run_case_experiment(
    features: &[CaseUnitFeatures],
    spec: &ExperimentSpec,
) -> Result<ExperimentReport> {
    spec.validate()?;
    let t0 = Instant::now();
    let mut samples = Vec::new();
    let mut hyperparameters = Vec::new();
    let mut failures = Vec::new();

    for r in 0..spec.replications {
        let rep_seed = seeds::stream(spec.seed, "case-rep", r as u64);
        match run_case_replication(features, spec, r, rep_seed) {
            Ok((mut s, h)) => {
                samples.append(&mut s);
                hyperparameters.push(h);
            }
            Err(e) => {
                log::warn!("case replication {r} failed: {e}");
                failures.push(format!("replication {r}: {e}"));
            }
        }
    }
    ExperimentReport::assemble(
        spec.seed,
        spec.replications,
        samples,
        hyperparameters,
        failures,
        t0.elapsed().as_secs_f64(),
    )
}

fn run_case_replication(
    features: &[CaseUnitFeatures],
    spec: &ExperimentSpec,
    r: usize,
    rep_seed: u64,
) -> Result<(Vec<MapeSample>, ChosenHypers)> {
    let clients: Vec<CaseClient> = cmapss::build_case_split(features, rep_seed)?;
    let datasets: Vec<ClientDataset> = clients.iter().map(|c| c.train.clone()).collect();

    let hypers = select_hypers(spec, &datasets, rep_seed)?;
    let chosen = ChosenHypers {
        replication: r,
        lambda: hypers.0,
        alpha: hypers.1,
        theta: hypers.2,
    };

    let mut samples = Vec::new();
    for &method in &spec.methods {
        let params = train_method(method, &datasets, hypers, &spec.fed, &spec.cfl, rep_seed)?;
        for (i, client) in clients.iter().enumerate() {
            let mut pairs = Vec::new();
            for j in 0..client.test_rul.len() {
                let x = DVector::from_iterator(
                    client.test_features.ncols(),
                    client.test_features.row(j).iter().copied(),
                );
                let pred = cmapss::predict_rul(&params[i], &x, client.test_observed[j])?;
                pairs.push((pred, client.test_rul[j]));
            }
            samples.push(MapeSample {
                method,
                client_id: client.id.clone(),
                replication: r,
                mape_pct: baselines::mean_mape(&pairs)?,
            });
        }
    }
    Ok((samples, chosen))
}

/// Largest feasible alpha for a negative-exponential kernel and client count.
pub fn max_feasible_alpha_neg_exp(theta: f64, m: usize) -> Result<f64> {
    let kernel = SimilarityKernel::neg_exp(theta)?;
    crate::fed::FedConfig::max_feasible_alpha(&kernel, m)
}
