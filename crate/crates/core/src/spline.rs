//! Natural cubic smoothing splines (Reinsch formulation): minimize
//! `sum (s(t_k) - z_k)^2 + rho * int (s'')^2` over natural cubic splines
//! with knots at the observation times. Straight lines lie in the null
//! space of the penalty, so linear inputs are reproduced exactly for any
//! `rho`, and `rho -> inf` recovers the least-squares line.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A fitted smoothing spline: fitted values and curvatures at the knots.
#[derive(Debug, Clone)]
pub struct SplineFit {
    /// Knot locations (the observation times), strictly increasing.
    pub knots: Vec<f64>,
    /// Fitted values at the knots.
    pub fitted: Vec<f64>,
    /// Second derivatives at the knots; zero at both ends (natural spline).
    pub curvature: Vec<f64>,
    /// Smoothness penalty used for the fit.
    pub penalty: f64,
}

/// Fit a natural cubic smoothing spline with penalty `rho >= 0`.
///
/// Solves `(R + rho * Q^T Q) gamma = Q^T z` for the interior curvatures and
/// sets the fitted values to `z - rho * Q gamma`.
pub fn smooth_spline_fit(points: &[(f64, f64)], rho: f64) -> Result<SplineFit> {
    if points.len() < 4 {
        return Err(Error::InvalidDataset(format!(
            "spline fit needs at least 4 points, got {}",
            points.len()
        )));
    }
    if !(rho >= 0.0) {
        return Err(Error::InvalidParameter(format!("rho must be nonnegative, got {rho}")));
    }
    let n = points.len();
    for w in points.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::InvalidDataset(format!(
                "spline times must be strictly increasing ({} then {})",
                w[0].0, w[1].0
            )));
        }
    }
    let t: Vec<f64> = points.iter().map(|p| p.0).collect();
    let z = DVector::from_iterator(n, points.iter().map(|p| p.1));
    let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();

    // Q: n x (n-2), columns indexed by interior knots; R: (n-2) x (n-2)
    let k = n - 2;
    let mut q = DMatrix::zeros(n, k);
    let mut r = DMatrix::zeros(k, k);
    for j in 0..k {
        q[(j, j)] = 1.0 / h[j];
        q[(j + 1, j)] = -1.0 / h[j] - 1.0 / h[j + 1];
        q[(j + 2, j)] = 1.0 / h[j + 1];
        r[(j, j)] = (h[j] + h[j + 1]) / 3.0;
        if j + 1 < k {
            r[(j, j + 1)] = h[j + 1] / 6.0;
            r[(j + 1, j)] = h[j + 1] / 6.0;
        }
    }

    let qtz = q.transpose() * &z;
    let lhs = &r + rho * q.transpose() * &q;
    let gamma_interior = lhs
        .cholesky()
        .map(|c| c.solve(&qtz))
        .ok_or_else(|| Error::Divergence("spline system not positive definite".into()))?;

    let fitted_vec = &z - rho * &q * &gamma_interior;
    let mut curvature = vec![0.0; n];
    for j in 0..k {
        curvature[j + 1] = gamma_interior[j];
    }
    Ok(SplineFit {
        knots: t,
        fitted: fitted_vec.iter().copied().collect(),
        curvature,
        penalty: rho,
    })
}

impl SplineFit {
    fn segment(&self, x: f64) -> usize {
        // clamp to the knot span; outside it the natural spline is linear,
        // handled by evaluating the boundary segment's linear extension
        let n = self.knots.len();
        match self.knots.binary_search_by(|k| k.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 2),
        }
    }

    /// Evaluate the fitted curve; linear extrapolation outside the knots.
    pub fn evaluate(&self, x: f64) -> f64 {
        let n = self.knots.len();
        if x < self.knots[0] {
            return self.fitted[0] + (x - self.knots[0]) * self.derivative(self.knots[0]);
        }
        if x > self.knots[n - 1] {
            return self.fitted[n - 1] + (x - self.knots[n - 1]) * self.derivative(self.knots[n - 1]);
        }
        let i = self.segment(x);
        let h = self.knots[i + 1] - self.knots[i];
        let a = self.knots[i + 1] - x;
        let b = x - self.knots[i];
        a / h * self.fitted[i]
            + b / h * self.fitted[i + 1]
            + (a * a * a / h - h * a) * self.curvature[i] / 6.0
            + (b * b * b / h - h * b) * self.curvature[i + 1] / 6.0
    }

    /// First derivative of the fitted curve; constant outside the knots.
    pub fn derivative(&self, x: f64) -> f64 {
        let n = self.knots.len();
        let x = x.clamp(self.knots[0], self.knots[n - 1]);
        let i = self.segment(x);
        let h = self.knots[i + 1] - self.knots[i];
        let a = self.knots[i + 1] - x;
        let b = x - self.knots[i];
        (self.fitted[i + 1] - self.fitted[i]) / h
            + (-3.0 * a * a / h + h) * self.curvature[i] / 6.0
            + (3.0 * b * b / h - h) * self.curvature[i + 1] / 6.0
    }

    /// Slope at the last knot.
    pub fn terminal_slope(&self) -> f64 {
        self.derivative(self.knots[self.knots.len() - 1])
    }

    /// Fitted value at the last knot.
    pub fn terminal_level(&self) -> f64 {
        self.fitted[self.fitted.len() - 1]
    }
}

/// Pick the spline penalty by k-fold cross-validation over a candidate grid,
/// scoring held-out squared error. Ties break toward the smoother fit.
pub fn select_penalty(points: &[(f64, f64)], candidates: &[f64], folds: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Empty("penalty candidates"));
    }
    let n = points.len();
    if n < 8 || folds < 2 {
        // too few points for honest validation; prefer the median candidate
        let mut sorted = candidates.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        return Ok(sorted[sorted.len() / 2]);
    }
    let folds = folds.min(n / 4);
    let mut best = (f64::INFINITY, candidates[0]);
    for &rho in candidates {
        let mut sse = 0.0;
        let mut count = 0usize;
        for f in 0..folds {
            let train: Vec<(f64, f64)> = points
                .iter()
                .enumerate()
                .filter(|(i, _)| i % folds != f)
                .map(|(_, p)| *p)
                .collect();
            if train.len() < 4 {
                continue;
            }
            let fit = smooth_spline_fit(&train, rho)?;
            for (i, p) in points.iter().enumerate() {
                if i % folds == f {
                    let e = fit.evaluate(p.0) - p.1;
                    sse += e * e;
                    count += 1;
                }
            }
        }
        let score = sse / count.max(1) as f64;
        if score < best.0 - 1e-12 || (score <= best.0 + 1e-12 && rho > best.1) {
            best = (score.min(best.0), rho);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn reproduces_straight_lines_for_any_penalty() {
        let pts: Vec<(f64, f64)> = grid(25).iter().map(|&t| (t, 2.0 * t + 1.0)).collect();
        for rho in [0.0, 1e-6, 1.0, 1e6, 1e12] {
            let fit = smooth_spline_fit(&pts, rho).unwrap();
            for &(t, z) in &pts {
                assert!((fit.evaluate(t) - z).abs() < 1e-10, "rho {rho}");
            }
            // derivative is the line slope everywhere
            for t in [0.0, 0.31, 0.77, 1.0] {
                assert!((fit.derivative(t) - 2.0).abs() < 1e-8);
            }
            assert!((fit.evaluate(0.555) - (2.0 * 0.555 + 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_penalty_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<(f64, f64)> = grid(15)
            .iter()
            .map(|&t| (t, (6.0 * t).sin() + rng.random_range(-0.2..0.2)))
            .collect();
        let fit = smooth_spline_fit(&pts, 0.0).unwrap();
        for &(t, z) in &pts {
            assert!((fit.evaluate(t) - z).abs() < 1e-8);
        }
    }

    #[test]
    fn huge_penalty_approaches_least_squares_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<(f64, f64)> = grid(40)
            .iter()
            .map(|&t| (t, 3.0 * t - 0.5 + rng.random_range(-0.1..0.1)))
            .collect();
        // closed-form simple linear regression
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let icept = (sy - slope * sx) / n;

        let fit = smooth_spline_fit(&pts, 1e12).unwrap();
        for &(t, _) in &pts {
            let line = icept + slope * t;
            assert!((fit.evaluate(t) - line).abs() < 1e-3, "at {t}");
        }
        assert!((fit.terminal_slope() - slope).abs() < 1e-3);
    }

    #[test]
    fn smoothing_reduces_roughness_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<(f64, f64)> = grid(30)
            .iter()
            .map(|&t| (t, (9.0 * t).sin() + rng.random_range(-0.3..0.3)))
            .collect();
        let rough = |fit: &SplineFit| -> f64 { fit.curvature.iter().map(|c| c * c).sum() };
        let mut prev = f64::INFINITY;
        for rho in [1e-6, 1e-4, 1e-2, 1.0, 100.0] {
            let r = rough(&smooth_spline_fit(&pts, rho).unwrap());
            assert!(r <= prev + 1e-9, "rho {rho}: {r} > {prev}");
            prev = r;
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let pts: Vec<(f64, f64)> = grid(10).iter().map(|&t| (t, t)).collect();
        assert!(smooth_spline_fit(&pts[..3], 1.0).is_err());
        assert!(smooth_spline_fit(&pts, -1.0).is_err());
        let mut dup = pts.clone();
        dup[4].0 = dup[3].0;
        assert!(smooth_spline_fit(&dup, 1.0).is_err());
    }

    #[test]
    fn penalty_selection_prefers_smooth_fit_on_linear_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<(f64, f64)> = grid(60)
            .iter()
            .map(|&t| (t, 1.0 - 0.8 * t + rng.random_range(-0.05..0.05)))
            .collect();
        let rho = select_penalty(&pts, &[1e-4, 1e-2, 1.0, 100.0], 5).unwrap();
        assert!(rho >= 1e-2, "selected {rho}");
    }

    #[test]
    fn extrapolation_is_linear() {
        let pts: Vec<(f64, f64)> = grid(20).iter().map(|&t| (t, (3.0 * t).sin())).collect();
        let fit = smooth_spline_fit(&pts, 1e-3).unwrap();
        let s1 = fit.terminal_slope();
        let y1 = fit.evaluate(1.0);
        for dx in [0.1, 0.5, 2.0] {
            assert!((fit.evaluate(1.0 + dx) - (y1 + s1 * dx)).abs() < 1e-10);
        }
    }
}
