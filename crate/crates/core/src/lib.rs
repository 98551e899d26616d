//! Composite-latent-score structural equation estimation.
//!
//! A model is a set of equations in manifest variables, latent variables and
//! parameters. Estimation treats every case's latent scores as unknowns and
//! minimizes a weighted sum of squared equation residuals jointly over
//! parameters and scores.
//!
//! ```
//! use clssem::{estimate, parse_model, Dataset, EstimateConfig, WeightStrategy};
//!
//! let model = parse_model("latent: Z\nmanifest: x1, x2\nparam: c\neq e1: x1 = Z\neq e2: x2 = c*Z\n").unwrap();
//! let data = Dataset::from_columns(vec![
//!     ("x1".into(), vec![1.0, -0.5, 0.2, -0.7]),
//!     ("x2".into(), vec![0.8, -0.4, 0.2, -0.6]),
//! ])
//! .unwrap();
//! let cfg = EstimateConfig { strategy: WeightStrategy::W1, ..Default::default() };
//! let fit = estimate(&model, &data, &cfg).unwrap();
//! assert!(fit.diagnostics.converged);
//! ```

pub mod estimator;
pub mod expr;
pub mod fit;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod oracle;
pub mod simgen;
pub mod stats;
pub mod study;
pub mod weights;

mod init;

use thiserror::Error;

pub use estimator::{error_covariances, estimate, EstimateConfig, EstimationResult};
pub use expr::{parse_expr, Expr, ParseError, Symbol, SymbolKind, SymbolTable};
pub use fit::{
    chi_square_fit, permutation_null_fit, residual_mean_r, ChiSquareFit, DfMode, PermutationFit,
    PermutationOptions,
};
pub use model::{
    parse_model, parse_model_file, print_model, BoundData, Dataset, Model, ModelError,
};
pub use objective::{Objective, ObjectiveError, Residuals};
pub use optimizer::{minimize, Definiteness, OptimError, OptimResult, OptimizerConfig};
pub use simgen::{generate, SimSpec, Study};
pub use weights::WeightStrategy;

/// Any failure surfaced by the high-level API.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Model(String),
    #[error(transparent)]
    Data(#[from] model::DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{0}")]
    Config(String),
}

impl From<ModelError> for Error {
    fn from(e: ModelError) -> Self {
        Error::Model(e.to_string())
    }
}
