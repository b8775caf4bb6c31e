//! Smallest-extreme-value location-scale regression: distribution functions,
//! per-client parameter sets, the negative log-likelihood in transformed
//! parameters, and its analytic derivatives.
//!
//! The transformed parameterization (`beta_t = beta / sigma`, `sigma_t =
//! 1 / sigma`) makes the negative log-likelihood convex, which is what the
//! federated solver relies on.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Upper clamp on the linearized response before exponentiation.
const EXP_CLAMP: f64 = 700.0;

static EXP_CLAMP_COUNT: AtomicU64 = AtomicU64::new(0);

/// Number of times `exp` inputs were clamped since the last reset.
pub fn exp_clamp_count() -> u64 {
    EXP_CLAMP_COUNT.load(Ordering::Relaxed)
}

pub fn reset_exp_clamp_count() {
    EXP_CLAMP_COUNT.store(0, Ordering::Relaxed);
}

#[inline]
fn exp_clamped(z: f64) -> f64 {
    if z > EXP_CLAMP {
        EXP_CLAMP_COUNT.fetch_add(1, Ordering::Relaxed);
        log::debug!("clamped exp argument {z} to {EXP_CLAMP}");
        EXP_CLAMP.exp()
    } else {
        z.exp()
    }
}

/// Standard SEV density `exp(eps - exp(eps))`.
pub fn sev_pdf(eps: f64) -> f64 {
    (eps - eps.exp()).exp()
}

/// Standard SEV distribution function `1 - exp(-exp(eps))`.
pub fn sev_cdf(eps: f64) -> f64 {
    1.0 - (-eps.exp()).exp()
}

/// Standard SEV quantile `log(-log(1 - p))` for `p` in (0, 1).
pub fn sev_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "quantile probability must lie in (0, 1), got {p}"
        )));
    }
    Ok((-(1.0 - p).ln()).ln())
}

/// Per-client regression parameters on the natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientParams {
    /// Regression coefficients, intercept first (length K+1).
    pub beta: DVector<f64>,
    /// Scale parameter, strictly positive.
    pub sigma: f64,
}

impl ClientParams {
    pub fn new(beta: DVector<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("beta must be finite".into()));
        }
        Ok(Self { beta, sigma })
    }
}

/// Parameters after the convexifying transform.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedParams {
    /// `beta / sigma`, intercept first (length K+1).
    pub beta_t: DVector<f64>,
    /// `1 / sigma`, strictly positive.
    pub sigma_t: f64,
}

impl TransformedParams {
    pub fn new(beta_t: DVector<f64>, sigma_t: f64) -> Result<Self> {
        if !(sigma_t > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma_t must be positive, got {sigma_t}"
            )));
        }
        if beta_t.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("beta_t must be finite".into()));
        }
        Ok(Self { beta_t, sigma_t })
    }

    /// Number of coefficients plus the scale entry, i.e. K+2.
    pub fn dim(&self) -> usize {
        self.beta_t.len() + 1
    }

    /// Flatten in the fixed ordering (beta_t_0 .. beta_t_K, sigma_t).
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v.rows_mut(0, self.beta_t.len()).copy_from(&self.beta_t);
        v[self.beta_t.len()] = self.sigma_t;
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::InvalidParameter(
                "parameter vector needs at least two entries".into(),
            ));
        }
        let p = v.len() - 1;
        Self::new(DVector::from_iterator(p, v.iter().take(p).copied()), v[p])
    }

    pub fn squared_distance(&self, other: &Self) -> f64 {
        let mut d2 = (self.sigma_t - other.sigma_t).powi(2);
        for (a, b) in self.beta_t.iter().zip(other.beta_t.iter()) {
            d2 += (a - b).powi(2);
        }
        d2
    }
}

/// `(beta, sigma) -> (beta / sigma, 1 / sigma)`.
pub fn transform(params: &ClientParams) -> Result<TransformedParams> {
    TransformedParams::new(&params.beta / params.sigma, 1.0 / params.sigma)
}

/// Inverse of [`transform`].
pub fn untransform(w: &TransformedParams) -> Result<ClientParams> {
    ClientParams::new(&w.beta_t / w.sigma_t, 1.0 / w.sigma_t)
}

/// One client's private regression data. Never crosses the federation
/// message boundary.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: String,
    /// n x (K+1) design matrix, first column identically one.
    pub features: DMatrix<f64>,
    /// Response vector, length n.
    pub responses: DVector<f64>,
}

impl ClientDataset {
    pub fn new(client_id: impl Into<String>, features: DMatrix<f64>, responses: DVector<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidDataset("dataset must have at least one row".into()));
        }
        if features.nrows() != responses.len() {
            return Err(Error::InvalidDataset(format!(
                "feature rows ({}) and responses ({}) disagree",
                features.nrows(),
                responses.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) || responses.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidDataset("non-finite entries".into()));
        }
        for i in 0..features.nrows() {
            if features[(i, 0)] != 1.0 {
                return Err(Error::InvalidDataset(format!(
                    "first feature column must be identically one (row {i})"
                )));
            }
        }
        Ok(Self {
            client_id: client_id.into(),
            features,
            responses,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    /// Number of feature columns including the intercept, i.e. K+1.
    pub fn p(&self) -> usize {
        self.features.ncols()
    }
}

fn check_compatible(w: &TransformedParams, data: &ClientDataset) -> Result<()> {
    if w.beta_t.len() != data.p() {
        return Err(Error::InvalidParameter(format!(
            "parameter dimension {} does not match feature dimension {}",
            w.beta_t.len(),
            data.p()
        )));
    }
    Ok(())
}

#[inline]
fn linearized(w: &TransformedParams, data: &ClientDataset, row: usize) -> f64 {
    let mut xb = 0.0;
    for k in 0..data.p() {
        xb += data.features[(row, k)] * w.beta_t[k];
    }
    data.responses[row] * w.sigma_t - xb
}

/// Negative log-likelihood in transformed parameters:
/// `-sum_j [log sigma_t + z_j - exp(z_j)]` with `z_j = y_j sigma_t - x_j' beta_t`.
pub fn nll(w: &TransformedParams, data: &ClientDataset) -> Result<f64> {
    check_compatible(w, data)?;
    let log_st = w.sigma_t.ln();
    let mut total = 0.0;
    for j in 0..data.n() {
        let z = linearized(w, data, j);
        total -= log_st + z - exp_clamped(z);
    }
    Ok(total)
}

/// Analytic gradient of [`nll`], ordered (beta_t_0 .. beta_t_K, sigma_t).
pub fn nll_grad(w: &TransformedParams, data: &ClientDataset) -> Result<DVector<f64>> {
    check_compatible(w, data)?;
    let p = data.p();
    let mut g = DVector::zeros(p + 1);
    for j in 0..data.n() {
        let z = linearized(w, data, j);
        let one_minus_ez = 1.0 - exp_clamped(z);
        for k in 0..p {
            g[k] += data.features[(j, k)] * one_minus_ez;
        }
        g[p] -= 1.0 / w.sigma_t + data.responses[j] * one_minus_ez;
    }
    Ok(g)
}

/// Analytic Hessian of [`nll`]; symmetric positive semidefinite.
pub fn nll_hessian(w: &TransformedParams, data: &ClientDataset) -> Result<DMatrix<f64>> {
    check_compatible(w, data)?;
    let p = data.p();
    let d = p + 1;
    let mut h = DMatrix::zeros(d, d);
    for j in 0..data.n() {
        let z = linearized(w, data, j);
        let ez = exp_clamped(z);
        let y = data.responses[j];
        // dz/dw = (-x_j, y_j); contribution ez * (dz)(dz)'
        for a in 0..p {
            let xa = data.features[(j, a)];
            for b in a..p {
                h[(a, b)] += ez * xa * data.features[(j, b)];
            }
            h[(a, p)] -= ez * xa * y;
        }
        h[(p, p)] += ez * y * y;
    }
    h[(p, p)] += data.n() as f64 / (w.sigma_t * w.sigma_t);
    for a in 0..d {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
    Ok(h)
}

/// Failure-time quantile prediction `x' beta + sigma * Q_sev(p)`.
pub fn predict_quantile(params: &ClientParams, x: &DVector<f64>, p: f64) -> Result<f64> {
    if x.len() != params.beta.len() {
        return Err(Error::InvalidParameter(format!(
            "feature vector length {} does not match beta length {}",
            x.len(),
            params.beta.len()
        )));
    }
    Ok(params.beta.dot(x) + params.sigma * sev_quantile(p)?)
}
