//! Fit diagnostics: residual mean `R`, a permutation null distribution of
//! `F_min`, and a chi-square statistic for users willing to assume normal,
//! independent residuals.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::estimator::{estimate_bound, EstimateConfig, EstimationResult};
use crate::model::{Dataset, Model};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("equation `{0}` has zero residual variance")]
    ZeroVariance(String),
    #[error("degrees of freedom are not positive ({0})")]
    NonPositiveDf(i64),
}

/// `sqrt(F_min / (n m))`.
pub fn residual_mean_r(f_min: f64, n: usize, m: usize) -> f64 {
    (f_min / (n * m) as f64).sqrt()
}

/// Degrees-of-freedom rule for the chi-square statistic. Both rules are
/// experimental.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DfMode {
    /// `n m - (n Q + S_free)`.
    Naive,
    /// `n m`.
    Equations,
}

impl fmt::Display for DfMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DfMode::Naive => "naive",
            DfMode::Equations => "equations",
        })
    }
}

impl FromStr for DfMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "naive" => Ok(DfMode::Naive),
            "equations" => Ok(DfMode::Equations),
            _ => Err(format!(
                "unknown df mode `{s}` (expected naive or equations)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareFit {
    pub statistic: f64,
    pub df: u64,
    pub p_value: f64,
    pub mode: DfMode,
}

/// Degrees of freedom for `n` cases, `m` equations, `q` latents and `s`
/// free parameters.
pub fn degrees_of_freedom(mode: DfMode, n: usize, m: usize, q: usize, s: usize) -> i64 {
    let nm = (n * m) as i64;
    match mode {
        DfMode::Naive => nm - (n * q + s) as i64,
        DfMode::Equations => nm,
    }
}

/// `sum_{i,l} eps[i,l]^2 / var_l` against a chi-square distribution.
pub fn chi_square_fit(result: &EstimationResult, mode: DfMode) -> Result<ChiSquareFit, FitError> {
    let n = result.n_cases();
    let m = result.n_equations();
    let q = result.latent_names.len();
    let s = result.params.iter().filter(|p| !p.fixed).count();
    let all_zero = result
        .residuals
        .iter()
        .all(|row| row.iter().all(|e| *e == 0.0));
    let df = degrees_of_freedom(mode, n, m, q, s);
    if df <= 0 {
        return Err(FitError::NonPositiveDf(df));
    }
    let statistic = if all_zero {
        0.0
    } else {
        let mut total = 0.0;
        for l in 0..m {
            let var = result.residual_variances[l];
            if var <= 0.0 {
                return Err(FitError::ZeroVariance(result.equation_labels[l].clone()));
            }
            total += result
                .residuals
                .iter()
                .map(|row| row[l] * row[l])
                .sum::<f64>()
                / var;
        }
        total
    };
    let dist = ChiSquared::new(df as f64).map_err(|_| FitError::NonPositiveDf(df))?;
    Ok(ChiSquareFit {
        statistic,
        df: df as u64,
        p_value: dist.sf(statistic),
        mode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationFit {
    pub original_f_min: f64,
    /// `F_min` of every successful replicate, in replicate order.
    pub samples: Vec<f64>,
    pub failures: usize,
    /// Fraction of null samples at or below the original `F_min`.
    pub exceedance_fraction: f64,
    pub null_min: Option<f64>,
    pub null_median: Option<f64>,
    pub null_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationOptions {
    pub reps: usize,
    pub seed: u64,
    /// Debug switch: use the identity permutation for every column.
    pub identity: bool,
}

/// Re-estimates the model on data whose columns were shuffled independently
/// and compares the resulting `F_min` values with `original_f_min`. Every
/// replicate uses the same estimation settings (including the optimizer
/// seed) as the original fit.
pub fn permutation_null_fit(
    model: &Model,
    data: &Dataset,
    cfg: &EstimateConfig,
    original_f_min: f64,
    opts: PermutationOptions,
) -> Result<PermutationFit, crate::Error> {
    let n = data.n_rows();
    let cols = data.n_cols();
    let cfg = EstimateConfig {
        check_uniqueness: false,
        chi_square: None,
        ..cfg.clone()
    };
    let outcomes: Vec<Option<f64>> = (0..opts.reps)
        .into_par_iter()
        .map(|rep| {
            let orders: Vec<Vec<usize>> = (0..cols)
                .map(|j| {
                    let mut order: Vec<usize> = (0..n).collect();
                    if !opts.identity {
                        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                        rng.set_stream((rep * cols + j) as u64);
                        order.shuffle(&mut rng);
                    }
                    order
                })
                .collect();
            let shuffled = data.permute_columns(&orders);
            let bound = shuffled.bind(model).ok()?;
            estimate_bound(model, &bound, &cfg, None)
                .ok()
                .map(|r| r.f_min)
        })
        .collect();
    let samples: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let failures = outcomes.len() - samples.len();
    let below = samples.iter().filter(|f| **f <= original_f_min).count();
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let median = (!sorted.is_empty()).then(|| {
        let k = sorted.len();
        if k % 2 == 1 {
            sorted[k / 2]
        } else {
            0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
        }
    });
    Ok(PermutationFit {
        original_f_min,
        exceedance_fraction: if samples.is_empty() {
            0.0
        } else {
            below as f64 / samples.len() as f64
        },
        null_min: sorted.first().copied(),
        null_max: sorted.last().copied(),
        null_median: median,
        samples,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r_examples() {
        assert_eq!(residual_mean_r(0.0, 3, 4), 0.0);
        assert_eq!(residual_mean_r(12.0, 3, 4), 1.0);
        assert_eq!(residual_mean_r(4.0, 2, 2), 1.0);
    }

    #[test]
    fn df_examples() {
        assert_eq!(degrees_of_freedom(DfMode::Naive, 100, 13, 3, 8), 992);
        assert_eq!(degrees_of_freedom(DfMode::Equations, 100, 13, 3, 8), 1300);
    }

    #[test]
    fn df_mode_parsing() {
        assert_eq!("naive".parse::<DfMode>().unwrap(), DfMode::Naive);
        assert_eq!("Equations".parse::<DfMode>().unwrap(), DfMode::Equations);
        assert!("other".parse::<DfMode>().is_err());
    }
}
