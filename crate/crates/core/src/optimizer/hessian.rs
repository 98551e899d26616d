//! Curvature diagnostics at a minimizer.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::Differentiable;
use crate::objective::Objective;

/// Largest unknown vector for which the Hessian is built by finite
/// differences of the analytic gradient.
pub const EXACT_HESSIAN_MAX_DIM: usize = 200;

/// Largest unknown vector for which the dense Gauss-Newton matrix is formed.
pub const GAUSS_NEWTON_MAX_DIM: usize = 1500;

/// Eigenvalues within this fraction of the largest one count as zero.
const RELATIVE_EIGEN_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Definiteness {
    PositiveDefinite,
    SemiDefinite,
    Indefinite,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMethod {
    FiniteDifference,
    GaussNewton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uniqueness {
    pub classification: Definiteness,
    pub method: Option<HessianMethod>,
    pub min_eigenvalue: Option<f64>,
    pub max_eigenvalue: Option<f64>,
    pub warning: Option<String>,
}

impl Uniqueness {
    fn unknown(method: Option<HessianMethod>, reason: String) -> Self {
        warn!("local uniqueness check failed: {reason}");
        Uniqueness {
            classification: Definiteness::Unknown,
            method,
            min_eigenvalue: None,
            max_eigenvalue: None,
            warning: Some(reason),
        }
    }

    /// Positive-definite curvature: the minimizer is locally unique.
    pub fn is_locally_unique(&self) -> bool {
        self.classification == Definiteness::PositiveDefinite
    }
}

/// Central differences of the gradient, symmetrized.
pub(crate) fn finite_difference_hessian<P: Differentiable + ?Sized>(
    problem: &P,
    x: &[f64],
) -> Option<DMatrix<f64>> {
    let n = x.len();
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let step = 1e-5 * x[j].abs().max(1.0);
        xp[j] = x[j] + step;
        let (_, gp) = problem.value_and_gradient(&xp)?;
        xp[j] = x[j] - step;
        let (_, gm) = problem.value_and_gradient(&xp)?;
        xp[j] = x[j];
        for i in 0..n {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    let ht = h.transpose();
    Some((h + ht) * 0.5)
}

/// Classifies a symmetric matrix by its extreme eigenvalues.
pub(crate) fn classify(h: DMatrix<f64>, method: HessianMethod) -> Uniqueness {
    if h.iter().any(|v| !v.is_finite()) {
        return Uniqueness::unknown(Some(method), "non-finite Hessian entry".into());
    }
    if h.nrows() == 0 {
        return Uniqueness::unknown(Some(method), "empty unknown vector".into());
    }
    let eig = SymmetricEigen::new(h);
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    let scale = eig.eigenvalues.amax();
    let tol = RELATIVE_EIGEN_TOL * scale;
    let classification = if scale == 0.0 {
        Definiteness::SemiDefinite
    } else if min > tol {
        Definiteness::PositiveDefinite
    } else if min >= -tol {
        Definiteness::SemiDefinite
    } else {
        Definiteness::Indefinite
    };
    Uniqueness {
        classification,
        method: Some(method),
        min_eigenvalue: Some(min),
        max_eigenvalue: Some(max),
        warning: None,
    }
}

/// Definiteness of the objective's curvature at `u`. Small problems use a
/// finite-difference Hessian of the analytic gradient; larger ones the
/// Gauss-Newton approximation, which can only separate positive-definite
/// from semi-definite.
pub fn local_uniqueness(obj: &Objective<'_>, u: &[f64]) -> Uniqueness {
    let dim = u.len();
    if dim <= EXACT_HESSIAN_MAX_DIM {
        return match finite_difference_hessian(obj, u) {
            Some(h) => classify(h, HessianMethod::FiniteDifference),
            None => Uniqueness::unknown(
                Some(HessianMethod::FiniteDifference),
                "objective non-finite near the solution".into(),
            ),
        };
    }
    if dim > GAUSS_NEWTON_MAX_DIM {
        return Uniqueness::unknown(
            None,
            format!(
                "{dim} unknowns exceed the {GAUSS_NEWTON_MAX_DIM} supported by the dense check"
            ),
        );
    }
    match obj.gauss_newton(u) {
        Ok(h) => classify(h, HessianMethod::GaussNewton),
        Err(e) => Uniqueness::unknown(Some(HessianMethod::GaussNewton), e.to_string()),
    }
}
