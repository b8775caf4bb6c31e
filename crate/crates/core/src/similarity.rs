//! Similarity kernels `A(||.||^2)` used by the pairwise regularizer and the
//! aggregation weights. Every kernel must be increasing and concave with
//! `A(0) = 0` and a finite derivative at the origin; construction verifies
//! those properties on a numeric grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel family. The negative exponential is the default; the SCAD variant
/// is a standard-form substitute available behind the `scad_std` config name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    NegExp { theta: f64 },
    Mcp { theta: f64, lambda_p: f64 },
    ScadStd { theta: f64, lambda_p: f64 },
}

/// Marker that the numeric property checks passed at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelCertificate {
    /// Largest observed concavity violation on the validation grid.
    pub max_concavity_violation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityKernel {
    kind: KernelKind,
    certificate: KernelCertificate,
}

impl SimilarityKernel {
    pub fn new(kind: KernelKind) -> Result<Self> {
        match kind {
            KernelKind::NegExp { theta } => {
                if !(theta > 0.0) {
                    return Err(Error::KernelConfig(format!(
                        "negative exponential kernel requires theta > 0, got {theta}"
                    )));
                }
            }
            KernelKind::Mcp { theta, lambda_p } => {
                if !(theta > 1.0) || !(lambda_p > 0.0) {
                    return Err(Error::KernelConfig(format!(
                        "MCP kernel requires theta > 1 and lambda_p > 0, got theta={theta}, lambda_p={lambda_p}"
                    )));
                }
            }
            KernelKind::ScadStd { theta, lambda_p } => {
                if !(theta > 2.0) || !(lambda_p > 0.0) {
                    return Err(Error::KernelConfig(format!(
                        "SCAD kernel requires theta > 2 and lambda_p > 0, got theta={theta}, lambda_p={lambda_p}"
                    )));
                }
            }
        }
        let certificate = validate_kernel(kind)?;
        Ok(Self { kind, certificate })
    }

    pub fn neg_exp(theta: f64) -> Result<Self> {
        Self::new(KernelKind::NegExp { theta })
    }

    pub fn mcp(theta: f64, lambda_p: f64) -> Result<Self> {
        Self::new(KernelKind::Mcp { theta, lambda_p })
    }

    pub fn scad_std(theta: f64, lambda_p: f64) -> Result<Self> {
        Self::new(KernelKind::ScadStd { theta, lambda_p })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn certificate(&self) -> KernelCertificate {
        self.certificate
    }

    /// Kernel value at squared distance `d2`.
    pub fn a_value(&self, d2: f64) -> Result<f64> {
        if d2 < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "squared distance must be nonnegative, got {d2}"
            )));
        }
        Ok(a_value_raw(self.kind, d2))
    }

    /// Derivative `A'` at squared distance `d2`; nonnegative and nonincreasing.
    pub fn a_deriv(&self, d2: f64) -> Result<f64> {
        if d2 < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "squared distance must be nonnegative, got {d2}"
            )));
        }
        Ok(a_deriv_raw(self.kind, d2))
    }
}

fn a_value_raw(kind: KernelKind, t: f64) -> f64 {
    match kind {
        KernelKind::NegExp { theta } => 1.0 - (-t / theta).exp(),
        KernelKind::Mcp { theta, lambda_p } => {
            if t <= theta * lambda_p {
                lambda_p * t - t * t / (2.0 * theta)
            } else {
                theta * lambda_p * lambda_p / 2.0
            }
        }
        KernelKind::ScadStd { theta, lambda_p } => {
            if t <= lambda_p {
                lambda_p * t
            } else if t <= theta * lambda_p {
                (2.0 * theta * lambda_p * t - t * t - lambda_p * lambda_p) / (2.0 * (theta - 1.0))
            } else {
                lambda_p * lambda_p * (theta + 1.0) / 2.0
            }
        }
    }
}

fn a_deriv_raw(kind: KernelKind, t: f64) -> f64 {
    match kind {
        KernelKind::NegExp { theta } => (-t / theta).exp() / theta,
        KernelKind::Mcp { theta, lambda_p } => {
            if t <= theta * lambda_p {
                lambda_p - t / theta
            } else {
                0.0
            }
        }
        KernelKind::ScadStd { theta, lambda_p } => {
            if t <= lambda_p {
                lambda_p
            } else if t <= theta * lambda_p {
                (theta * lambda_p - t) / (theta - 1.0)
            } else {
                0.0
            }
        }
    }
}

/// Numerically verify the similarity-function properties on a dense grid:
/// `A(0) = 0`, nondecreasing values, nonnegative and nonincreasing
/// derivative, finite derivative at the origin.
pub fn validate_kernel(kind: KernelKind) -> Result<KernelCertificate> {
    let a0 = a_value_raw(kind, 0.0);
    if a0.abs() > 1e-12 {
        return Err(Error::KernelProperty {
            property: "A(0) = 0",
            at: 0.0,
        });
    }
    let d0 = a_deriv_raw(kind, 1e-12);
    if !d0.is_finite() {
        return Err(Error::KernelProperty {
            property: "finite A'(0+)",
            at: 0.0,
        });
    }

    // log-spaced grid spanning small to large squared distances, plus zero
    let mut grid = vec![0.0];
    let mut t = 1e-8;
    while t < 1e4 {
        grid.push(t);
        t *= 1.35;
    }
    let mut prev_v = f64::NEG_INFINITY;
    let mut prev_d = f64::INFINITY;
    let mut max_violation = 0.0f64;
    for &t in &grid {
        let v = a_value_raw(kind, t);
        let d = a_deriv_raw(kind, t);
        if !v.is_finite() || !d.is_finite() {
            return Err(Error::KernelProperty {
                property: "finite values",
                at: t,
            });
        }
        if v < prev_v - 1e-12 {
            return Err(Error::KernelProperty {
                property: "A nondecreasing",
                at: t,
            });
        }
        if d < -1e-12 {
            return Err(Error::KernelProperty {
                property: "A' nonnegative",
                at: t,
            });
        }
        if d > prev_d + 1e-12 {
            return Err(Error::KernelProperty {
                property: "A' nonincreasing (concavity)",
                at: t,
            });
        }
        max_violation = max_violation.max((d - prev_d).max(0.0));
        prev_v = v;
        prev_d = d;
    }
    Ok(KernelCertificate {
        max_concavity_violation: max_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn neg_exp_values() {
        let k = SimilarityKernel::neg_exp(1.0).unwrap();
        assert_eq!(k.a_value(0.0).unwrap(), 0.0);
        assert_relative_eq!(k.a_value(1.0).unwrap(), 1.0 - (-1.0f64).exp(), max_relative = 1e-12);
        let k2 = SimilarityKernel::neg_exp(2.0).unwrap();
        assert_relative_eq!(k2.a_deriv(0.0).unwrap(), 0.5, max_relative = 1e-12);
        assert!(k.a_value(-0.1).is_err());
    }

    #[test]
    fn mcp_values() {
        let k = SimilarityKernel::mcp(2.0, 1.0).unwrap();
        // flat branch
        assert_relative_eq!(k.a_value(5.0).unwrap(), 1.0, max_relative = 1e-12);
        assert_eq!(k.a_deriv(3.0).unwrap(), 0.0);
        // kink continuity
        let kink = 2.0;
        assert_abs_diff_eq!(
            k.a_value(kink - 1e-9).unwrap(),
            k.a_value(kink + 1e-9).unwrap(),
            epsilon = 1e-8
        );
        assert_abs_diff_eq!(k.a_deriv(kink - 1e-9).unwrap(), 0.0, epsilon = 1e-8);
        // bounded by theta * lambda_p^2 / 2
        for t in [0.0, 0.5, 1.0, 1.9, 2.0, 10.0, 1e6] {
            let v = k.a_value(t).unwrap();
            assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn scad_std_values() {
        let k = SimilarityKernel::scad_std(3.7, 1.0).unwrap();
        assert_eq!(k.a_value(0.0).unwrap(), 0.0);
        // continuity at both branch points
        for bp in [1.0, 3.7] {
            assert_abs_diff_eq!(
                k.a_value(bp - 1e-9).unwrap(),
                k.a_value(bp + 1e-9).unwrap(),
                epsilon = 1e-7
            );
        }
        assert_eq!(k.a_deriv(10.0).unwrap(), 0.0);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(SimilarityKernel::neg_exp(-1.0).is_err());
        assert!(SimilarityKernel::neg_exp(0.0).is_err());
        assert!(SimilarityKernel::mcp(1.0, 1.0).is_err());
        assert!(SimilarityKernel::mcp(2.0, 0.0).is_err());
        assert!(SimilarityKernel::scad_std(2.0, 1.0).is_err());
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let kernels = [
            SimilarityKernel::neg_exp(0.7).unwrap(),
            SimilarityKernel::neg_exp(5.0).unwrap(),
            SimilarityKernel::mcp(2.0, 1.0).unwrap(),
            SimilarityKernel::scad_std(3.7, 0.8).unwrap(),
        ];
        for k in &kernels {
            let mut t = 1e-4f64;
            while t < 100.0 {
                // keep h large enough that 1-ulp noise in A stays below tolerance
                let h = (t * 1e-6).max(1e-7);
                let fd = (k.a_value(t + h).unwrap() - k.a_value(t - h).unwrap()) / (2.0 * h);
                let d = k.a_deriv(t).unwrap();
                // skip points straddling a kink
                if (d - fd).abs() > 1e-6 * fd.abs() + 1e-9 {
                    let near_kink = match k.kind() {
                        KernelKind::Mcp { theta, lambda_p } => (t - theta * lambda_p).abs() < 1e-3,
                        KernelKind::ScadStd { theta, lambda_p } => {
                            (t - lambda_p).abs() < 1e-3 || (t - theta * lambda_p).abs() < 1e-3
                        }
                        _ => false,
                    };
                    assert!(near_kink, "derivative mismatch at {t}: {d} vs {fd}");
                }
                t *= 3.1;
            }
        }
    }

    #[test]
    fn derivative_monotone_nonincreasing() {
        for k in [
            SimilarityKernel::neg_exp(1.0).unwrap(),
            SimilarityKernel::mcp(2.0, 1.0).unwrap(),
        ] {
            let mut prev = f64::INFINITY;
            let mut t = 0.0;
            while t < 50.0 {
                let d = k.a_deriv(t).unwrap();
                assert!(d >= 0.0);
                assert!(d <= prev + 1e-12);
                prev = d;
                t += 0.17;
            }
        }
    }

    #[test]
    fn certificate_reports_grid_check() {
        let k = SimilarityKernel::mcp(2.0, 1.0).unwrap();
        assert!(k.certificate().max_concavity_violation < 1e-12);
    }
}
