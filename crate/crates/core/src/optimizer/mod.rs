//! Numerical minimization of the estimation objective.
//!
//! [`minimize`] runs L-BFGS from several seeded starting points (in parallel)
//! and keeps the best local minimizer. [`maximize_on_simplex`] is a
//! derivative-free search over weight vectors, and [`local_uniqueness`]
//! classifies the curvature at a solution.

mod hessian;
mod lbfgs;
mod simplex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hessian::{
    local_uniqueness, Definiteness, HessianMethod, Uniqueness, EXACT_HESSIAN_MAX_DIM,
    GAUSS_NEWTON_MAX_DIM,
};
pub use lbfgs::{lbfgs, LbfgsSettings, LocalResult, Termination};
pub use simplex::{maximize_on_simplex, project_to_simplex, SimplexResult, WEIGHT_FLOOR};

/// A smooth (or piecewise smooth) function with an analytic gradient.
/// `None` signals a non-finite evaluation.
pub trait Differentiable: Sync {
    fn dim(&self) -> usize;

    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)>;

    fn value(&self, x: &[f64]) -> Option<f64> {
        self.value_and_gradient(x).map(|(f, _)| f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    /// Stop when the gradient norm falls below this fraction of its value at
    /// the start point.
    pub grad_tol: f64,
    /// Relative objective change treated as a stall.
    pub f_tol: f64,
    pub multistart: usize,
    pub seed: u64,
    /// Curvature pairs kept by L-BFGS.
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
    /// Standard deviation of the multi-start perturbation, relative to
    /// `max(|x|, 1)`.
    pub perturbation: f64,
    /// Objective evaluations allowed to the simplex search of strategy `wa`.
    pub simplex_budget: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iter: 2000,
            grad_tol: 1e-8,
            f_tol: 1e-14,
            multistart: 5,
            seed: 0,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
            perturbation: 0.5,
            simplex_budget: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("objective is non-finite at every start point")]
    Initialization,
    #[error("start point has length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let positive = [
            ("grad_tol", self.grad_tol),
            ("f_tol", self.f_tol),
            ("c1", self.c1),
            ("c2", self.c2),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(OptimError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(OptimError::Config(
                "line search needs 0 < c1 < c2 < 1".into(),
            ));
        }
        if self.multistart == 0 {
            return Err(OptimError::Config("multistart must be at least 1".into()));
        }
        if self.memory == 0 || self.max_line_search == 0 {
            return Err(OptimError::Config(
                "memory and max_line_search must be positive".into(),
            ));
        }
        if !(self.perturbation >= 0.0 && self.perturbation.is_finite()) {
            return Err(OptimError::Config(
                "perturbation must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn lbfgs_settings(&self) -> LbfgsSettings {
        LbfgsSettings {
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            f_tol: self.f_tol,
            memory: self.memory,
            c1: self.c1,
            c2: self.c2,
            max_line_search: self.max_line_search,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub index: usize,
    pub start_value: f64,
    /// `None` when no finite start could be drawn.
    pub final_value: Option<f64>,
    pub converged: bool,
    pub termination: Option<Termination>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub termination: Termination,
    pub grad_norm: f64,
    pub best_start: usize,
    pub starts: Vec<StartRecord>,
    pub uniqueness: Option<Uniqueness>,
}

const START_RETRIES: usize = 10;
/// Relative difference below which two start values count as the same
/// minimum.
const TIE_TOLERANCE: f64 = 1e-10;

/// Start point `index`: the base point itself for index 0, otherwise a
/// Gaussian perturbation drawn from stream `index` of `seed`. Retries with
/// fresh draws while the objective is non-finite.
fn start_point<P: Differentiable + ?Sized>(
    problem: &P,
    base: &[f64],
    index: usize,
    cfg: &OptimizerConfig,
) -> Option<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    for attempt in 0..=START_RETRIES {
        let x: Vec<f64> = if index == 0 && attempt == 0 {
            base.to_vec()
        } else {
            base.iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + cfg.perturbation * v.abs().max(1.0) * z
                })
                .collect()
        };
        if let Some(f) = problem.value(&x) {
            if f.is_finite() {
                return Some((x, f));
            }
        }
    }
    None
}

/// Multi-start local minimization. Deterministic for a fixed configuration:
/// each start owns its random stream, and ties are broken by start index.
pub fn minimize<P: Differentiable + ?Sized>(
    problem: &P,
    cfg: &OptimizerConfig,
    init: &[f64],
) -> Result<OptimResult, OptimError> {
    cfg.validate()?;
    if init.len() != problem.dim() {
        return Err(OptimError::Dimension {
            expected: problem.dim(),
            found: init.len(),
        });
    }
    let settings = cfg.lbfgs_settings();
    let runs: Vec<(StartRecord, Option<LocalResult>)> = (0..cfg.multistart)
        .into_par_iter()
        .map(|index| match start_point(problem, init, index, cfg) {
            None => (
                StartRecord {
                    index,
                    start_value: f64::NAN,
                    final_value: None,
                    converged: false,
                    termination: None,
                    iterations: 0,
                },
                None,
            ),
            Some((x0, f0)) => {
                let local = lbfgs(problem, &x0, &settings);
                let record = StartRecord {
                    index,
                    start_value: f0,
                    final_value: local.as_ref().map(|r| r.value),
                    converged: local.as_ref().is_some_and(|r| r.termination.converged()),
                    termination: local.as_ref().map(|r| r.termination),
                    iterations: local.as_ref().map_or(0, |r| r.iterations),
                };
                (record, local)
            }
        })
        .collect();

    let mut best: Option<(usize, &LocalResult)> = None;
    for (rec, local) in &runs {
        if let Some(r) = local {
            if best.is_none_or(|(_, b)| r.value < b.value) {
                best = Some((rec.index, r));
            }
        }
    }
    let (mut best_start, mut r) = best.ok_or(OptimError::Initialization)?;
    // a start that stalled on roundoff at the same value as a converged start
    // is not a better answer; report the converged one
    if !r.termination.converged() {
        let tie = TIE_TOLERANCE * r.value.abs().max(f64::MIN_POSITIVE);
        let converged_tie = runs.iter().find_map(|(rec, local)| {
            local
                .as_ref()
                .filter(|l| l.termination.converged() && l.value - r.value <= tie)
                .map(|l| (rec.index, l))
        });
        if let Some(found) = converged_tie {
            (best_start, r) = found;
        }
    }
    let r = r.clone();
    Ok(OptimResult {
        converged: r.termination.converged(),
        termination: r.termination,
        grad_norm: r.grad_norm,
        value: r.value,
        x: r.x,
        best_start,
        starts: runs.into_iter().map(|(rec, _)| rec).collect(),
        uniqueness: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Bowl;

    impl Differentiable for Bowl {
        fn dim(&self) -> usize {
            3
        }
        fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
            let c = [1.5, -0.5, 2.0];
            let h = [2.0, 5.0, 0.3];
            let f = (0..3)
                .map(|k| 0.5 * h[k] * (x[k] - c[k]).powi(2))
                .sum::<f64>()
                + 7.0;
            Some((f, (0..3).map(|k| h[k] * (x[k] - c[k])).collect()))
        }
    }

    /// Two wells, the deeper one at +2.
    struct DoubleWell;

    impl Differentiable for DoubleWell {
        fn dim(&self) -> usize {
            1
        }
        fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
            let t = x[0];
            let f = (t * t - 4.0).powi(2) - t;
            Some((f, vec![4.0 * t * (t * t - 4.0) - 1.0]))
        }
    }

    #[test]
    fn quadratic_minimum() {
        let cfg = OptimizerConfig {
            grad_tol: 1e-13,
            ..Default::default()
        };
        let r = minimize(&Bowl, &cfg, &[0.0; 3]).unwrap();
        assert!(r.converged);
        assert!((r.value - 7.0).abs() < 1e-10);
        for (a, b) in r.x.iter().zip([1.5, -0.5, 2.0]) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(r.starts.len(), 5);
        for s in &r.starts {
            assert!(r.value <= s.start_value);
        }
    }

    #[test]
    fn deterministic_and_restart_stable() {
        let cfg = OptimizerConfig {
            seed: 42,
            ..Default::default()
        };
        let a = minimize(&DoubleWell, &cfg, &[-2.0]).unwrap();
        let b = minimize(&DoubleWell, &cfg, &[-2.0]).unwrap();
        assert_eq!(a, b);
        let again = minimize(&DoubleWell, &cfg, &a.x).unwrap();
        assert!((again.value - a.value).abs() <= 1e-12 * a.value.abs());
    }

    #[test]
    fn multistart_escapes_shallow_well() {
        let single = OptimizerConfig {
            multistart: 1,
            ..Default::default()
        };
        let r1 = minimize(&DoubleWell, &single, &[-2.0]).unwrap();
        assert!(r1.x[0] < 0.0);
        let multi = OptimizerConfig {
            multistart: 8,
            perturbation: 2.0,
            seed: 3,
            ..Default::default()
        };
        let r = minimize(&DoubleWell, &multi, &[-2.0]).unwrap();
        assert!(r.x[0] > 0.0, "{r:?}");
        assert!(r.value < r1.value);
    }

    #[test]
    fn all_starts_non_finite() {
        struct Nan;
        impl Differentiable for Nan {
            fn dim(&self) -> usize {
                1
            }
            fn value_and_gradient(&self, _: &[f64]) -> Option<(f64, Vec<f64>)> {
                None
            }
        }
        let err = minimize(&Nan, &OptimizerConfig::default(), &[0.0]).unwrap_err();
        assert_eq!(err, OptimError::Initialization);
    }

    #[test]
    fn config_validation() {
        let bad = OptimizerConfig {
            multistart: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig {
            grad_tol: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
