//! Server-side aggregation. This module sees only parameter vectors: the
//! message boundary carries `TransformedParams` columns and nothing else, so
//! no client data is reachable from these code paths.

use crate::error::{Error, Result};
use crate::sev::TransformedParams;
use crate::similarity::SimilarityKernel;

/// Aggregation weights for one client; a probability vector over all m
/// clients whenever the feasibility bound holds.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
}

/// The parameter matrix of all clients at one iteration, with the opaque
/// client identifiers used to fix a canonical summation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamsBoard {
    pub client_ids: Vec<String>,
    pub columns: Vec<TransformedParams>,
    pub iteration: usize,
}

impl ParamsBoard {
    pub fn new(client_ids: Vec<String>, columns: Vec<TransformedParams>, iteration: usize) -> Result<Self> {
        if client_ids.len() != columns.len() || columns.is_empty() {
            return Err(Error::InvalidParameter(
                "board needs one column per client id and at least one client".into(),
            ));
        }
        let dim = columns[0].dim();
        if columns.iter().any(|c| c.dim() != dim) {
            return Err(Error::InvalidParameter("board columns must share a dimension".into()));
        }
        Ok(Self {
            client_ids,
            columns,
            iteration,
        })
    }

    pub fn m(&self) -> usize {
        self.columns.len()
    }

    pub fn dim(&self) -> usize {
        self.columns[0].dim()
    }

    /// Client indices ordered by client id; aggregation sums in this order so
    /// results are invariant under permutation of the input datasets.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.m()).collect();
        idx.sort_by(|&a, &b| self.client_ids[a].cmp(&self.client_ids[b]));
        idx
    }

    /// Wire encoding of one round: (K+2) * m floats, independent of any
    /// client's sample count.
    pub fn to_floats(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.m() * self.dim());
        for col in &self.columns {
            out.extend(col.to_vector().iter().copied());
        }
        out
    }

    pub fn from_floats(
        client_ids: Vec<String>,
        dim: usize,
        floats: &[f64],
        iteration: usize,
    ) -> Result<Self> {
        if dim < 2 || floats.len() != client_ids.len() * dim {
            return Err(Error::InvalidParameter(format!(
                "expected {} floats for {} clients of dimension {dim}, got {}",
                client_ids.len() * dim,
                client_ids.len(),
                floats.len()
            )));
        }
        let columns = floats
            .chunks(dim)
            .map(|chunk| {
                TransformedParams::from_vector(&nalgebra::DVector::from_column_slice(chunk))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(client_ids, columns, iteration)
    }
}

/// Similarity-weighted combination weights for client `i`:
/// `a_{i,h} = gamma * A'(||w_i - w_h||^2)` for `h != i`, with the self-weight
/// taking the remaining probability mass.
pub fn compute_weights(
    board: &ParamsBoard,
    i: usize,
    kernel: &SimilarityKernel,
    gamma: f64,
) -> Result<WeightVector> {
    let m = board.m();
    let mut weights = vec![0.0; m];
    let mut off_diag_sum = 0.0;
    for &h in &board.canonical_order() {
        if h == i {
            continue;
        }
        let d2 = board.columns[i].squared_distance(&board.columns[h]);
        let a = gamma * kernel.a_deriv(d2)?;
        weights[h] = a;
        off_diag_sum += a;
    }
    let self_weight = 1.0 - off_diag_sum;
    if self_weight < -1e-12 {
        let a0 = kernel.a_deriv(0.0)?;
        return Err(Error::WeightFeasibility {
            value: gamma * (m as f64 - 1.0) * a0,
            m,
            max_gamma: 1.0 / ((m as f64 - 1.0) * a0),
        });
    }
    weights[i] = self_weight.max(0.0);
    Ok(WeightVector { weights })
}

/// Personalized cloud update for client `i`: the convex combination
/// `s_i = sum_h a_{i,h} w_h`, equal to one gradient step of size
/// `gamma / 2` on the pairwise similarity term.
pub fn aggregate(
    board: &ParamsBoard,
    i: usize,
    kernel: &SimilarityKernel,
    gamma: f64,
) -> Result<TransformedParams> {
    let wv = compute_weights(board, i, kernel, gamma)?;
    let dim = board.dim();
    let mut acc = nalgebra::DVector::zeros(dim);
    for &h in &board.canonical_order() {
        let a = wv.weights[h];
        if a != 0.0 {
            acc += a * board.columns[h].to_vector();
        }
    }
    TransformedParams::from_vector(&acc)
}
