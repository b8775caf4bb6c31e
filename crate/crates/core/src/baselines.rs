//! Comparison models: independent per-client maximum likelihood and the
//! conventional federated (single shared model) baseline, plus the MAPE
//! metric used by every experiment.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::sev::{self, untransform, ClientDataset, ClientParams, TransformedParams};
use crate::solver;

/// Conventional federated learning (FedAvg-style) configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CflConfig {
    pub rounds: usize,
    /// Local gradient-descent steps per round (E).
    pub local_steps: usize,
    /// Initial local step size; each step backtracks from here.
    pub local_lr: f64,
    pub early_stop_tol: f64,
    pub seed: u64,
}

impl Default for CflConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            local_steps: 5,
            local_lr: 0.1,
            early_stop_tol: 1e-6,
            seed: 0,
        }
    }
}

impl CflConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_steps == 0 || !(self.local_lr > 0.0) {
            return Err(Error::Config(
                "CFL rounds, local_steps, and local_lr must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A local maximum-likelihood fit with its convergence diagnostics.
#[derive(Debug, Clone)]
pub struct MleFit {
    pub params: ClientParams,
    pub transformed: TransformedParams,
    pub grad_norm_inf: f64,
    /// Scale collapsed toward zero (responses fit exactly).
    pub degenerate: bool,
}

/// Independent SEV regression MLE for one client; Newton with line search
/// on the transformed parameters, gradient norm below 1e-8 at the solution.
pub fn local_mle(data: &ClientDataset) -> Result<MleFit> {
    let p = data.p();
    if data.n() < p + 1 {
        return Err(Error::UnderDetermined { n: data.n(), p: p + 1 });
    }
    let start = ols_start(data);
    let sol = solver::minimize(data, 0.0, None, &start, 1e-8, 500)?;
    if sol.degenerate {
        log::warn!(
            "client {}: degenerate fit, scale collapsed toward zero",
            data.client_id
        );
    }
    let params = untransform(&sol.w)?;
    Ok(MleFit {
        params,
        transformed: sol.w,
        grad_norm_inf: sol.grad_norm_inf,
        degenerate: sol.degenerate,
    })
}

/// Least-squares warm start for the MLE solve.
fn ols_start(data: &ClientDataset) -> TransformedParams {
    let x = &data.features;
    let y = &data.responses;
    let p = data.p();
    let mut xtx = x.transpose() * x;
    for d in 0..p {
        xtx[(d, d)] += 1e-9;
    }
    let xty = x.transpose() * y;
    let beta = xtx
        .cholesky()
        .map(|c| c.solve(&xty))
        .unwrap_or_else(|| DVector::zeros(p));
    let resid = y - x * &beta;
    let dof = (data.n().saturating_sub(p)).max(1) as f64;
    let sigma = (resid.norm_squared() / dof).sqrt().max(1e-3);
    let mut v = DVector::zeros(p + 1);
    for k in 0..p {
        v[k] = beta[k] / sigma;
    }
    v[p] = 1.0 / sigma;
    TransformedParams::from_vector(&v).expect("positive sigma")
}

/// Result of a conventional federated run; every client receives the same
/// parameters.
#[derive(Debug, Clone)]
pub struct CflFit {
    pub params: ClientParams,
    pub transformed: TransformedParams,
    pub rounds_run: usize,
    pub converged: bool,
}

/// FedAvg-style training of one shared global model: each round every
/// client runs `local_steps` backtracked gradient-descent steps on its own
/// negative log-likelihood, and the server replaces the global parameters
/// with the sample-size-weighted average of the local updates.
pub fn cfl_train(datasets: &[ClientDataset], cfg: &CflConfig) -> Result<CflFit> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Empty("datasets"));
    }
    let p = datasets[0].p();
    if datasets.iter().any(|d| d.p() != p) {
        return Err(Error::InvalidDataset("all clients must share the feature dimension".into()));
    }
    let sigma_idx = p;
    let total_n: f64 = datasets.iter().map(|d| d.n() as f64).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::stream(cfg.seed, "cfl-global", 0));
    let mut global = DVector::zeros(p + 1);
    for k in 0..=p {
        global[k] = rng.random_range(1e-9..10.0);
    }

    let mut rounds_run = 0;
    let mut converged = false;
    for round in 1..=cfg.rounds {
        let mut avg = DVector::zeros(p + 1);
        for data in datasets {
            let mut w = global.clone();
            for _ in 0..cfg.local_steps {
                w = gd_step(&w, data, cfg.local_lr, sigma_idx)?;
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite local update in round {round} (client {})",
                    data.client_id
                )));
            }
            avg += (data.n() as f64 / total_n) * w;
        }
        let delta = (&avg - &global).amax();
        global = avg;
        rounds_run = round;
        if delta < cfg.early_stop_tol {
            converged = true;
            break;
        }
    }

    let transformed = TransformedParams::from_vector(&global)?;
    let params = untransform(&transformed)?;
    Ok(CflFit {
        params,
        transformed,
        rounds_run,
        converged,
    })
}

/// One backtracked gradient-descent step keeping the scale entry positive.
fn gd_step(w: &DVector<f64>, data: &ClientDataset, lr: f64, sigma_idx: usize) -> Result<DVector<f64>> {
    let tp = TransformedParams::from_vector(w)?;
    let g = sev::nll_grad(&tp, data)?;
    let f0 = sev::nll(&tp, data)?;
    let g2 = g.norm_squared();
    if g2 == 0.0 {
        return Ok(w.clone());
    }
    let mut t = lr;
    for _ in 0..40 {
        let cand = w - t * &g;
        if cand[sigma_idx] > 0.0 {
            if let Ok(tp_c) = TransformedParams::from_vector(&cand) {
                if let Ok(fc) = sev::nll(&tp_c, data) {
                    if fc.is_finite() && fc <= f0 - 1e-4 * t * g2 {
                        return Ok(cand);
                    }
                }
            }
        }
        t *= 0.5;
    }
    // no acceptable step; stay put rather than diverge
    Ok(w.clone())
}

/// Absolute percentage error `|pred - truth| / truth * 100`; truth must be
/// positive (time-to-failure scale).
pub fn mape(pred: f64, truth: f64) -> Result<f64> {
    if !(truth > 0.0) {
        return Err(Error::NonPositiveTruth(truth));
    }
    Ok((pred - truth).abs() / truth * 100.0)
}

/// Mean absolute percentage error over prediction/truth pairs.
pub fn mean_mape(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("mape pairs"));
    }
    let mut total = 0.0;
    for &(p, t) in pairs {
        total += mape(p, t)?;
    }
    Ok(total / pairs.len() as f64)
}
