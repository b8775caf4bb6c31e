//! Damped Newton minimization of the transformed-parameter negative
//! log-likelihood, optionally with a quadratic pull toward a reference
//! point. Shared by the proximal client update and the local MLE baseline.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sev::{self, ClientDataset, TransformedParams};

/// Scale value beyond which a fit is treated as degenerate (sigma -> 0+).
pub const DEGENERATE_SIGMA_T: f64 = 1e8;

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone)]
pub struct Solution {
    pub w: TransformedParams,
    pub grad_norm_inf: f64,
    pub iterations: usize,
    /// Set when the scale ran away toward zero (perfect-fit data).
    pub degenerate: bool,
}

fn objective(v: &DVector<f64>, data: &ClientDataset, rho: f64, center: Option<&DVector<f64>>) -> Result<f64> {
    let w = TransformedParams::from_vector(v)?;
    let mut f = sev::nll(&w, data)?;
    if let Some(s) = center {
        let d = v - s;
        f += 0.5 * rho * d.norm_squared();
    }
    Ok(f)
}

fn gradient(v: &DVector<f64>, data: &ClientDataset, rho: f64, center: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    let w = TransformedParams::from_vector(v)?;
    let mut g = sev::nll_grad(&w, data)?;
    if let Some(s) = center {
        g += rho * (v - s);
    }
    Ok(g)
}

/// Minimize `nll(w) + (rho/2) ||w - center||^2` over transformed parameters,
/// keeping the scale entry strictly positive.
///
/// With `rho = 0` and no center this is the unpenalized MLE solve. Returns
/// when the infinity norm of the full gradient drops below `tol`.
pub fn minimize(
    data: &ClientDataset,
    rho: f64,
    center: Option<&DVector<f64>>,
    start: &TransformedParams,
    tol: f64,
    max_iter: usize,
) -> Result<Solution> {
    let dim = data.p() + 1;
    let sigma_idx = dim - 1;
    let mut v = start.to_vector();
    let mut f = objective(&v, data, rho, center)?;
    let mut stalled = 0usize;

    for iter in 0..max_iter {
        let g = gradient(&v, data, rho, center)?;
        let gnorm = g.amax();
        if gnorm <= tol {
            return Ok(Solution {
                w: TransformedParams::from_vector(&v)?,
                grad_norm_inf: gnorm,
                iterations: iter,
                degenerate: false,
            });
        }
        if v[sigma_idx] > DEGENERATE_SIGMA_T {
            return Ok(Solution {
                w: TransformedParams::from_vector(&v)?,
                grad_norm_inf: gnorm,
                iterations: iter,
                degenerate: true,
            });
        }

        let w = TransformedParams::from_vector(&v)?;
        let mut h = sev::nll_hessian(&w, data)?;
        if rho > 0.0 {
            for d in 0..dim {
                h[(d, d)] += rho;
            }
        }
        let dir = newton_direction(&h, &g)?;

        // keep sigma_t strictly positive along the step
        let mut t = 1.0f64;
        if dir[sigma_idx] < 0.0 {
            t = t.min(-0.95 * v[sigma_idx] / dir[sigma_idx]);
        }
        let slope = g.dot(&dir);
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &v + t * &dir;
            if cand[sigma_idx] > 0.0 {
                if let Ok(fc) = objective(&cand, data, rho, center) {
                    if fc.is_finite() && fc <= f + ARMIJO_C * t * slope {
                        // objective changes at the resolution of f64 mean the
                        // gradient has hit its floating-point noise floor
                        if (f - fc).abs() <= 8.0 * f64::EPSILON * (1.0 + f.abs()) {
                            stalled += 1;
                        } else {
                            stalled = 0;
                        }
                        v = cand;
                        f = fc;
                        accepted = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if accepted && stalled >= 3 {
            let g = gradient(&v, data, rho, center)?;
            return Ok(Solution {
                w: TransformedParams::from_vector(&v)?,
                grad_norm_inf: g.amax(),
                iterations: iter + 1,
                degenerate: v[sigma_idx] > DEGENERATE_SIGMA_T,
            });
        }
        if !accepted {
            // Newton step rejected everywhere along the ray; the gradient
            // itself is the remaining certificate
            return Err(Error::InnerSolver {
                max_iter: iter,
                residual: gnorm,
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { iteration: iter });
        }
    }

    let g = gradient(&v, data, rho, center)?;
    Err(Error::InnerSolver {
        max_iter,
        residual: g.amax(),
    })
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let mut ridge = 0.0;
    let scale = h.diagonal().amax().max(1.0);
    for _ in 0..12 {
        let mut hr = h.clone();
        if ridge > 0.0 {
            for d in 0..hr.nrows() {
                hr[(d, d)] += ridge;
            }
        }
        if let Some(chol) = hr.cholesky() {
            return Ok(-chol.solve(g));
        }
        ridge = if ridge == 0.0 { scale * 1e-10 } else { ridge * 100.0 };
    }
    Err(Error::Divergence("hessian factorization failed".into()))
}
