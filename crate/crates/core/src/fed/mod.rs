//! Personalized federated training loop: similarity-weighted aggregation on
//! the server followed by a proximal refinement on each client, iterated to
//! convergence. Only parameter vectors cross the client/server boundary.

pub mod server;

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::sev::{untransform, ClientDataset, ClientParams, TransformedParams};
use crate::similarity::SimilarityKernel;
use crate::solver;
pub use server::{aggregate, compute_weights, ParamsBoard, WeightVector};

/// Federated run configuration. `gamma` is tied to `2 * alpha` exactly, per
/// the aggregation-weight derivation.
#[derive(Debug, Clone)]
pub struct FedConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub kernel: SimilarityKernel,
    pub max_iter: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub early_stop_tol: f64,
    pub seed: u64,
}

/// Serializable subset of [`FedConfig`] for config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FedSettings {
    pub lambda: f64,
    pub alpha: f64,
    pub theta: f64,
    pub kernel: String,
    pub kernel_lambda_p: f64,
    pub max_iter: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub early_stop_tol: f64,
}

impl Default for FedSettings {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.01,
            theta: 1.0,
            kernel: "neg_exp".into(),
            kernel_lambda_p: 1.0,
            max_iter: 200,
            inner_tol: 1e-8,
            inner_max_iter: 100,
            early_stop_tol: 1e-6,
        }
    }
}

impl FedSettings {
    pub fn build(&self, seed: u64) -> Result<FedConfig> {
        let kernel = match self.kernel.as_str() {
            "neg_exp" => SimilarityKernel::neg_exp(self.theta)?,
            "mcp" => SimilarityKernel::mcp(self.theta, self.kernel_lambda_p)?,
            "scad_std" => SimilarityKernel::scad_std(self.theta, self.kernel_lambda_p)?,
            other => return Err(Error::Config(format!("unknown kernel `{other}`"))),
        };
        let mut cfg = FedConfig::new(self.lambda, self.alpha, kernel, seed)?;
        cfg.max_iter = self.max_iter;
        cfg.inner_tol = self.inner_tol;
        cfg.inner_max_iter = self.inner_max_iter;
        cfg.early_stop_tol = self.early_stop_tol;
        Ok(cfg)
    }
}

impl FedConfig {
    pub fn new(lambda: f64, alpha: f64, kernel: SimilarityKernel, seed: u64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
        }
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            lambda,
            alpha,
            gamma: 2.0 * alpha,
            kernel,
            max_iter: 200,
            inner_tol: 1e-8,
            inner_max_iter: 100,
            early_stop_tol: 1e-6,
            seed,
        })
    }

    /// Check the nonnegative-self-weight bound `gamma (m-1) A'(0) <= 1`
    /// for a given client count.
    pub fn validate_for(&self, m: usize) -> Result<()> {
        if self.gamma != 2.0 * self.alpha {
            return Err(Error::Config(format!(
                "gamma must equal 2 * alpha exactly (gamma={}, alpha={})",
                self.gamma, self.alpha
            )));
        }
        if m > 1 {
            let a0 = self.kernel.a_deriv(0.0)?;
            let value = self.gamma * (m as f64 - 1.0) * a0;
            if value > 1.0 + 1e-12 {
                return Err(Error::WeightFeasibility {
                    value,
                    m,
                    max_gamma: 1.0 / ((m as f64 - 1.0) * a0),
                });
            }
        }
        Ok(())
    }

    /// Largest feasible alpha for `m` clients under this kernel.
    pub fn max_feasible_alpha(kernel: &SimilarityKernel, m: usize) -> Result<f64> {
        if m <= 1 {
            return Ok(f64::INFINITY);
        }
        let a0 = kernel.a_deriv(0.0)?;
        Ok(1.0 / (2.0 * (m as f64 - 1.0) * a0))
    }
}

/// Client-side proximal refinement: minimize
/// `l_i(w) + (lambda / 2 alpha) ||w - s||^2`, warm-started at `s`.
pub fn prox_step(data: &ClientDataset, s: &TransformedParams, cfg: &FedConfig) -> Result<TransformedParams> {
    let rho = cfg.lambda / cfg.alpha;
    let center = s.to_vector();
    let center_opt = if cfg.lambda > 0.0 { Some(&center) } else { None };
    let sol = solver::minimize(data, rho, center_opt, s, cfg.inner_tol, cfg.inner_max_iter)?;
    Ok(sol.w)
}

/// Output of a federated run: per-client parameters on the natural scale
/// plus the per-iteration board trace.
#[derive(Debug, Clone)]
pub struct FedRun {
    pub params: Vec<ClientParams>,
    pub final_board: ParamsBoard,
    pub trace: Vec<ParamsBoard>,
    pub iterations: usize,
    pub converged: bool,
}

/// Run the two-step personalized federated loop over all clients.
pub fn run_federated(datasets: &[ClientDataset], cfg: &FedConfig) -> Result<FedRun> {
    if datasets.is_empty() {
        return Err(Error::Empty("datasets"));
    }
    let p = datasets[0].p();
    if datasets.iter().any(|d| d.p() != p) {
        return Err(Error::InvalidDataset("all clients must share the feature dimension".into()));
    }
    let m = datasets.len();
    cfg.validate_for(m)?;

    let client_ids: Vec<String> = datasets.iter().map(|d| d.client_id.clone()).collect();
    let columns: Vec<TransformedParams> = datasets
        .iter()
        .map(|d| init_params(p, cfg.seed, &d.client_id))
        .collect();
    let mut board = ParamsBoard::new(client_ids.clone(), columns, 0)?;
    let mut trace = vec![board.clone()];

    let mut iterations = 0;
    let mut converged = false;
    for t in 1..=cfg.max_iter {
        // server step: personalized aggregation for every client
        let cloud: Vec<TransformedParams> = (0..m)
            .map(|i| aggregate(&board, i, &cfg.kernel, cfg.gamma))
            .collect::<Result<Vec<_>>>()?;

        // client step: independent proximal refinements
        let mut next = Vec::with_capacity(m);
        for (i, data) in datasets.iter().enumerate() {
            let w = prox_step(data, &cloud[i], cfg)?;
            if w.to_vector().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { iteration: t });
            }
            next.push(w);
        }

        let mut max_delta = 0.0f64;
        for i in 0..m {
            let d = (next[i].to_vector() - board.columns[i].to_vector()).amax();
            max_delta = max_delta.max(d);
        }
        board = ParamsBoard::new(client_ids.clone(), next, t)?;
        trace.push(board.clone());
        iterations = t;
        if max_delta < cfg.early_stop_tol {
            converged = true;
            break;
        }
    }

    let params = board
        .columns
        .iter()
        .map(untransform)
        .collect::<Result<Vec<_>>>()?;
    Ok(FedRun {
        params,
        final_board: board,
        trace,
        iterations,
        converged,
    })
}

/// Uniform (0, 10) initialization from a per-client stream derived from
/// (seed, client id), so adding or removing clients does not reshuffle the
/// draws of the others.
fn init_params(p: usize, seed: u64, client_id: &str) -> TransformedParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(seed, seeds::fnv1a(client_id.as_bytes())));
    let mut v = DVector::zeros(p + 1);
    for k in 0..p {
        v[k] = rng.random_range(1e-9..10.0);
    }
    v[p] = rng.random_range(1e-9..10.0);
    TransformedParams::from_vector(&v).expect("positive draw")
}

/// Write the board trace as CSV: one record per (iteration, client),
/// parameter values in the fixed (beta_t.., sigma_t) order.
pub fn dump_trace(trace: &[ParamsBoard], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let dim = trace.first().map(|b| b.dim()).unwrap_or(0);
    let mut header = String::from("iteration,client_id");
    for k in 0..dim.saturating_sub(1) {
        header.push_str(&format!(",beta_t_{k}"));
    }
    header.push_str(",sigma_t");
    writeln!(f, "{header}")?;
    for board in trace {
        for (id, col) in board.client_ids.iter().zip(&board.columns) {
            let vals: Vec<String> = col.to_vector().iter().map(|x| format!("{x:.17e}")).collect();
            writeln!(f, "{},{},{}", board.iteration, id, vals.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines;
    use crate::sev;
    use nalgebra::DMatrix;
    use rand_distr::StandardNormal;

    fn synth(id: &str, n: usize, b0: f64, b1: f64, sigma: f64, seed: u64) -> ClientDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(n, 2);
        let mut y = DVector::zeros(n);
        for j in 0..n {
            let f: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let eps = (-(u.ln())).ln();
            x[(j, 0)] = 1.0;
            x[(j, 1)] = f;
            y[j] = b0 + b1 * f + sigma * eps;
        }
        ClientDataset::new(id.to_string(), x, y).unwrap()
    }

    fn cfg_with(lambda: f64, alpha: f64, theta: f64, seed: u64) -> FedConfig {
        FedConfig::new(lambda, alpha, SimilarityKernel::neg_exp(theta).unwrap(), seed).unwrap()
    }

    #[test]
    fn prox_with_dominating_quadratic_returns_center() {
        let data = synth("a", 30, 1.0, 0.5, 1.0, 3);
        let s = TransformedParams::from_vector(&DVector::from_column_slice(&[0.7, 0.3, 1.2])).unwrap();
        // lambda / (2 alpha) = 1e12
        let cfg = cfg_with(2e10, 0.01, 1.0, 0);
        let w = prox_step(&data, &s, &cfg).unwrap();
        assert!((w.to_vector() - s.to_vector()).amax() < 1e-5);
    }

    #[test]
    fn prox_without_penalty_is_local_mle() {
        let data = synth("a", 60, 1.0, 0.5, 0.8, 5);
        let s = TransformedParams::from_vector(&DVector::from_column_slice(&[1.0, 1.0, 1.0])).unwrap();
        let cfg = cfg_with(0.0, 0.05, 1.0, 0);
        let w = untransform(&prox_step(&data, &s, &cfg).unwrap()).unwrap();
        let mle = baselines::local_mle(&data).unwrap().params;
        assert!((w.beta.clone() - mle.beta).amax() < 1e-6);
        assert!((w.sigma - mle.sigma).abs() < 1e-6);
    }

    #[test]
    fn prox_satisfies_first_order_optimality() {
        let data = synth("a", 40, 0.5, -0.3, 1.2, 9);
        let s = TransformedParams::from_vector(&DVector::from_column_slice(&[2.0, 0.5, 0.8])).unwrap();
        let cfg = cfg_with(0.7, 0.02, 1.0, 0);
        let rho = cfg.lambda / cfg.alpha;
        let w = prox_step(&data, &s, &cfg).unwrap();
        let g = sev::nll_grad(&w, &data).unwrap() + rho * (w.to_vector() - s.to_vector());
        assert!(g.amax() < 10.0 * cfg.inner_tol, "residual {}", g.amax());

        // minimizer value no worse than at the warm start / center
        let obj = |p: &TransformedParams| {
            sev::nll(p, &data).unwrap() + 0.5 * rho * (p.to_vector() - s.to_vector()).norm_squared()
        };
        assert!(obj(&w) <= obj(&s) + 1e-10);
    }

    #[test]
    fn single_client_run_matches_local_mle() {
        let data = synth("solo", 80, 1.0, 0.4, 0.9, 13);
        let cfg = cfg_with(1.0, 0.05, 1.0, 4);
        let run = run_federated(std::slice::from_ref(&data), &cfg).unwrap();
        assert!(run.converged);
        let mle = baselines::local_mle(&data).unwrap().params;
        assert!((run.params[0].beta.clone() - mle.beta).amax() < 1e-4);
        assert!((run.params[0].sigma - mle.sigma).abs() < 1e-4);
    }

    #[test]
    fn same_seed_gives_identical_trace() {
        let data = vec![synth("a", 25, 1.0, 0.5, 1.0, 1), synth("b", 25, 0.8, 0.6, 1.0, 2)];
        let cfg = cfg_with(0.5, 0.05, 1.0, 99);
        let r1 = run_federated(&data, &cfg).unwrap();
        let r2 = run_federated(&data, &cfg).unwrap();
        assert_eq!(r1.trace.len(), r2.trace.len());
        for (a, b) in r1.trace.iter().zip(&r2.trace) {
            assert_eq!(a.to_floats(), b.to_floats());
        }
    }

    #[test]
    fn permuting_clients_permutes_outputs() {
        let a = synth("a", 30, 1.0, 0.5, 1.0, 1);
        let b = synth("b", 30, 0.6, 0.7, 1.1, 2);
        let c = synth("c", 30, 1.4, 0.2, 0.9, 3);
        let cfg = cfg_with(0.5, 0.05, 1.0, 7);
        let fwd = run_federated(&[a.clone(), b.clone(), c.clone()], &cfg).unwrap();
        let rev = run_federated(&[c, a, b], &cfg).unwrap();
        for (i, j) in [(0usize, 1usize), (1, 2), (2, 0)] {
            assert_eq!(fwd.params[i].beta, rev.params[j].beta);
            assert_eq!(fwd.params[i].sigma, rev.params[j].sigma);
        }
    }

    #[test]
    fn mle_consensus_is_a_fixed_point() {
        // all clients share the data and sit at its MLE: one aggregation +
        // prox cycle must not move the board beyond solver tolerance
        let data = synth("shared", 60, 1.0, 0.5, 1.0, 21);
        let cfg = cfg_with(1.0, 0.05, 1.0, 0);
        let mle = baselines::local_mle(&data).unwrap().params;
        let w = sev::transform(&mle).unwrap();
        let board = ParamsBoard::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![w.clone(), w.clone(), w.clone()],
            0,
        )
        .unwrap();
        for i in 0..3 {
            let s = aggregate(&board, i, &cfg.kernel, cfg.gamma).unwrap();
            assert!((s.to_vector() - w.to_vector()).amax() < 1e-12);
            let next = prox_step(&data, &s, &cfg).unwrap();
            assert!((next.to_vector() - w.to_vector()).amax() < 1e-5);
        }
    }

    #[test]
    fn identical_clients_attract_monotonically() {
        // same data under different ids: distinct random inits whose gap
        // must shrink every iteration under the negative-exponential kernel
        let base = synth("x", 40, 1.0, 0.5, 1.0, 31);
        let mut other = base.clone();
        other.client_id = "y".into();
        let cfg = cfg_with(1.0, 0.05, 1.0, 17);
        let run = run_federated(&[base, other], &cfg).unwrap();
        let mut prev = f64::INFINITY;
        for board in &run.trace {
            let gap = (board.columns[0].to_vector() - board.columns[1].to_vector()).norm();
            assert!(gap <= prev + 1e-9, "gap grew: {gap} > {prev}");
            prev = gap;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn joint_objective_descends_along_trace() {
        let data = vec![
            synth("a", 30, 1.0, 0.5, 1.0, 41),
            synth("b", 30, 0.9, 0.55, 1.0, 42),
            synth("c", 30, 1.1, 0.45, 1.0, 43),
        ];
        let cfg = cfg_with(1.0, 0.05, 1.0, 23);
        let run = run_federated(&data, &cfg).unwrap();
        let objective = |board: &ParamsBoard| -> f64 {
            let mut f = 0.0;
            for (i, d) in data.iter().enumerate() {
                f += sev::nll(&board.columns[i], d).unwrap();
            }
            for i in 0..3 {
                for h in (i + 1)..3 {
                    let d2 = board.columns[i].squared_distance(&board.columns[h]);
                    f += cfg.lambda * cfg.kernel.a_value(d2).unwrap();
                }
            }
            f
        };
        let mut prev = f64::INFINITY;
        for board in &run.trace {
            let f = objective(board);
            assert!(f <= prev + 1e-6 * (1.0 + prev.abs()), "objective rose: {f} > {prev}");
            prev = f;
        }
    }

    #[test]
    fn non_finite_iterates_are_reported_with_iteration() {
        // an absurd ridge-free setup cannot produce non-finite values here,
        // so exercise the validation path instead: lambda < 0 rejected
        assert!(FedConfig::new(-1.0, 0.05, SimilarityKernel::neg_exp(1.0).unwrap(), 0).is_err());
        assert!(FedConfig::new(1.0, 0.0, SimilarityKernel::neg_exp(1.0).unwrap(), 0).is_err());
    }

    #[test]
    fn trace_dump_writes_one_row_per_client_iteration() {
        let data = vec![synth("a", 20, 1.0, 0.5, 1.0, 51), synth("b", 20, 1.0, 0.5, 1.0, 52)];
        let cfg = cfg_with(0.5, 0.05, 1.0, 3);
        let run = run_federated(&data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        dump_trace(&run.trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,client_id,beta_t_0,beta_t_1,sigma_t");
        assert_eq!(lines.len(), 1 + 2 * run.trace.len());
    }
}
