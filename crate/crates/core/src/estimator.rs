//! Estimation entry point and result packaging.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::fit::{chi_square_fit, residual_mean_r, ChiSquareFit, DfMode, PermutationFit};
use crate::model::{BoundData, Dataset, Model};
use crate::objective::Objective;
use crate::optimizer::{
    local_uniqueness, minimize, Differentiable, OptimResult, OptimizerConfig, StartRecord,
    Termination, Uniqueness,
};
use crate::weights::{
    residual_variances, AngleEvaluation, StageRecord, WeightOutcome, WeightSettings, WeightStrategy,
};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub strategy: WeightStrategy,
    pub optimizer: OptimizerConfig,
    /// Penalty for soft constraints that do not name their own; `None` uses
    /// the size-scaled default.
    pub penalty: Option<f64>,
    pub weights: WeightSettings,
    /// Classify the curvature at the solution.
    pub check_uniqueness: bool,
    /// Compute the chi-square statistic with this degrees-of-freedom rule.
    pub chi_square: Option<DfMode>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            strategy: WeightStrategy::W1,
            optimizer: OptimizerConfig::default(),
            penalty: None,
            weights: WeightSettings::default(),
            check_uniqueness: true,
            chi_square: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    pub value: f64,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// `sqrt(F_min / (n m))`.
    pub r: f64,
    pub f_min: f64,
    pub permutation: Option<PermutationFit>,
    pub chi_square: Option<ChiSquareFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub strategy: WeightStrategy,
    pub converged: bool,
    pub termination: Termination,
    pub grad_norm: f64,
    pub best_start: usize,
    pub starts: Vec<StartRecord>,
    pub stages: Vec<StageRecord>,
    pub uniqueness: Option<Uniqueness>,
    /// Proportionality constant of `wo`.
    pub k: Option<f64>,
    /// Angle criterion at the final weights (`wa`).
    pub h: Option<f64>,
    pub angle_evaluations: Vec<AngleEvaluation>,
    pub simplex_budget_exhausted: Option<bool>,
    pub penalty: Vec<f64>,
    pub seed: u64,
    pub warnings: Vec<String>,
    /// How `normalize` constraints were interpreted, when the model has any.
    pub normalization: Option<String>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub params: Vec<ParamEstimate>,
    pub latent_names: Vec<String>,
    pub equation_labels: Vec<String>,
    /// `n x Q`, effective scores (after hard transforms), not post-centered.
    pub latent_scores: Vec<Vec<f64>>,
    /// `n x m`.
    pub residuals: Vec<Vec<f64>>,
    pub residual_variances: Vec<f64>,
    /// `m x m`, `n` denominator.
    pub residual_cov: Vec<Vec<f64>>,
    /// `Q x m`, `n` denominator.
    pub latent_error_cov: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub f_min: f64,
    pub fit: FitReport,
    pub diagnostics: Diagnostics,
    /// Raw unknown vector of the solution (free parameters, then scores).
    #[serde(skip)]
    pub unknowns: Vec<f64>,
}

impl EstimationResult {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn n_cases(&self) -> usize {
        self.residuals.len()
    }

    pub fn n_equations(&self) -> usize {
        self.equation_labels.len()
    }

    /// Latent scores as a CSV document with one column per latent.
    pub fn scores_csv(&self) -> Result<String, Error> {
        table_csv(&self.latent_names, &self.latent_scores)
    }

    /// Residuals as a CSV document with one column per equation.
    pub fn residuals_csv(&self) -> Result<String, Error> {
        table_csv(&self.equation_labels, &self.residuals)
    }

    pub fn to_json(&self) -> Result<String, Error> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}

fn table_csv(header: &[String], rows: &[Vec<f64>]) -> Result<String, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

/// Residual covariance (`m x m`) and latent-residual covariance (`Q x m`),
/// both with `n` denominator.
pub fn error_covariances(result: &EstimationResult) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    covariances(&result.latent_scores, &result.residuals)
}

fn columns(rows: &[Vec<f64>], width: usize) -> Vec<Vec<f64>> {
    (0..width)
        .map(|j| rows.iter().map(|r| r[j]).collect())
        .collect()
}

fn covariances(scores: &[Vec<f64>], residuals: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let m = residuals.first().map_or(0, Vec::len);
    let q = scores.first().map_or(0, Vec::len);
    let eps = columns(residuals, m);
    let z = columns(scores, q);
    let ee = eps
        .iter()
        .map(|a| eps.iter().map(|b| crate::stats::covariance(a, b)).collect())
        .collect();
    let ze = z
        .iter()
        .map(|a| eps.iter().map(|b| crate::stats::covariance(a, b)).collect())
        .collect();
    (ee, ze)
}

const NORMALIZATION_NOTE: &str =
    "normalize(Z) is interpreted as sum_i Z_i^2 = n (unit mean square), not sum_i Z_i^2 = 0";

/// Negated scores for every latent whose scale comes from `normalize` and
/// whose scores covary negatively with the latent's first indicator.
fn latents_to_flip(model: &Model, data: &BoundData, obj: &Objective<'_>, u: &[f64]) -> Vec<usize> {
    let (n, q) = (data.n_cases(), model.n_latent());
    let scores = obj.scores_of(u);
    (0..q)
        .filter(|&k| model.has_normalize(k))
        .filter(|&k| {
            let Some(eq) = model
                .equations()
                .iter()
                .find(|e| e.latents.contains(&k) && !e.manifests.is_empty())
            else {
                return false;
            };
            let j = *eq.manifests.iter().next().expect("non-empty");
            let z: Vec<f64> = (0..n).map(|i| scores[i * q + k]).collect();
            crate::stats::covariance(&z, &data.column(j)) < 0.0
        })
        .collect()
}

/// Objective over the free parameters only, scores held fixed.
struct ParamsOnly<'a, 'b> {
    obj: &'b Objective<'a>,
    scores: Vec<f64>,
}

impl Differentiable for ParamsOnly<'_, '_> {
    fn dim(&self) -> usize {
        self.obj.layout().n_params
    }

    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let mut u = x.to_vec();
        u.extend_from_slice(&self.scores);
        let (f, g) = self.obj.value_and_gradient(&u).ok()?;
        Some((f, g[..x.len()].to_vec()))
    }
}

/// Applies the sign convention for normalize-scaled latents: negate the
/// scores, refit the parameters with the scores frozen, then polish jointly.
/// The flipped solution replaces the original only when its objective value
/// is within `1e-8` relative.
fn apply_sign_convention(
    model: &Model,
    data: &BoundData,
    obj: &Objective<'_>,
    cfg: &OptimizerConfig,
    r: OptimResult,
    warnings: &mut Vec<String>,
) -> OptimResult {
    let flips = latents_to_flip(model, data, obj, &r.x);
    if flips.is_empty() {
        return r;
    }
    let lay = obj.layout();
    let mut u = r.x.clone();
    for &k in &flips {
        for i in 0..lay.n_cases {
            u[lay.latent(i, k)] = -u[lay.latent(i, k)];
        }
    }
    let single = OptimizerConfig {
        multistart: 1,
        ..cfg.clone()
    };
    let frozen = ParamsOnly {
        obj,
        scores: lay.scores(&u).to_vec(),
    };
    if let Ok(p) = minimize(&frozen, &single, lay.params(&u)) {
        u[..lay.n_params].copy_from_slice(&p.x);
    }
    match minimize(obj, &single, &u) {
        Ok(flipped)
            if (flipped.value - r.value).abs() <= 1e-8 * r.value.abs().max(1e-300)
                && latents_to_flip(model, data, obj, &flipped.x).is_empty() =>
        {
            OptimResult {
                starts: r.starts,
                best_start: r.best_start,
                ..flipped
            }
        }
        _ => {
            let names: Vec<&str> = flips
                .iter()
                .map(|&k| model.latent_names()[k].as_str())
                .collect();
            let msg = format!(
                "could not orient the sign of {}; scores reported as found",
                names.join(", ")
            );
            warn!("{msg}");
            warnings.push(msg);
            r
        }
    }
}

/// Estimates parameters and latent scores of `model` on `data`.
pub fn estimate(
    model: &Model,
    data: &Dataset,
    cfg: &EstimateConfig,
) -> Result<EstimationResult, Error> {
    let bound = data.bind(model)?;
    estimate_bound(model, &bound, cfg, None)
}

/// Like [`estimate`], starting from a caller-supplied unknown vector.
pub fn estimate_from(
    model: &Model,
    data: &Dataset,
    cfg: &EstimateConfig,
    init: &[f64],
) -> Result<EstimationResult, Error> {
    let bound = data.bind(model)?;
    estimate_bound(model, &bound, cfg, Some(init))
}

pub(crate) fn estimate_bound(
    model: &Model,
    data: &BoundData,
    cfg: &EstimateConfig,
    init: Option<&[f64]>,
) -> Result<EstimationResult, Error> {
    let started = Instant::now();
    cfg.optimizer.validate()?;
    let n = data.n_cases();
    let q = model.n_latent();
    let mut warnings: Vec<String> = model.warnings().to_vec();
    let s = model.n_free_params();
    if n < q + s {
        let msg = format!(
            "only {n} cases for {q} latents and {s} free parameters; estimates may be unidentified"
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let init = match init {
        Some(u) => u.to_vec(),
        None => crate::init::initial_point(model, data),
    };
    let outcome: WeightOutcome = crate::weights::run_strategy(model, data, cfg, &init)?;
    warnings.extend(outcome.warnings.iter().cloned());
    let obj = Objective::with_penalty(model, data, outcome.weights.clone(), cfg.penalty)?;
    let mut solution = outcome.solution;
    if (0..q).any(|k| model.has_normalize(k)) {
        solution =
            apply_sign_convention(model, data, &obj, &cfg.optimizer, solution, &mut warnings);
    }
    let u = solution.x.clone();
    let f_min = obj.value(&u)?;
    if !solution.converged {
        warnings.push(format!(
            "minimization stopped without convergence ({:?})",
            solution.termination
        ));
    }
    let uniqueness = cfg.check_uniqueness.then(|| local_uniqueness(&obj, &u));

    let params: Vec<ParamEstimate> = model
        .params()
        .iter()
        .zip(obj.params_of(&u))
        .map(|(p, v)| ParamEstimate {
            name: p.name.clone(),
            value: v,
            fixed: p.fixed.is_some(),
        })
        .collect();
    let scores = obj.scores_of(&u);
    let latent_scores: Vec<Vec<f64>> = (0..n)
        .map(|i| scores[i * q..(i + 1) * q].to_vec())
        .collect();
    let res = obj.residuals(&u)?;
    let residual_variances = residual_variances(&res);
    let residuals = res.rows();
    let (residual_cov, latent_error_cov) = covariances(&latent_scores, &residuals);
    let m = model.n_equations();

    let normalization = (0..q)
        .any(|k| model.has_normalize(k))
        .then(|| NORMALIZATION_NOTE.to_string());
    if let Some(note) = &normalization {
        info!("{note}");
    }
    let mut result = EstimationResult {
        params,
        latent_names: model.latent_names().to_vec(),
        equation_labels: model.equations().iter().map(|e| e.label.clone()).collect(),
        latent_scores,
        residuals,
        residual_variances,
        residual_cov,
        latent_error_cov,
        weights: outcome.weights,
        f_min,
        fit: FitReport {
            r: residual_mean_r(f_min, n, m),
            f_min,
            permutation: None,
            chi_square: None,
        },
        diagnostics: Diagnostics {
            strategy: cfg.strategy,
            converged: solution.converged,
            termination: solution.termination,
            grad_norm: solution.grad_norm,
            best_start: solution.best_start,
            starts: solution.starts,
            stages: outcome.stages,
            uniqueness,
            k: outcome.k,
            h: outcome.h,
            angle_evaluations: outcome.evaluations,
            simplex_budget_exhausted: outcome.simplex_budget_exhausted,
            penalty: obj.penalty_weights(),
            seed: cfg.optimizer.seed,
            warnings: Vec::new(),
            normalization,
            wall_time_secs: 0.0,
        },
        unknowns: u,
    };
    if let Some(mode) = cfg.chi_square {
        match chi_square_fit(&result, mode) {
            Ok(c) => result.fit.chi_square = Some(c),
            Err(e) => warnings.push(format!("chi-square test skipped: {e}")),
        }
    }
    result.diagnostics.warnings = warnings;
    result.diagnostics.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(result)
}
