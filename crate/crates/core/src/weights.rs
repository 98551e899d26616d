//! Equation-weight strategies.
//!
//! * `w1`: every equation weighs 1.
//! * `wn`: `n^-L` where `L` is the number of latents in the equation.
//! * `ww`: reciprocal residual variances of the `wn` solution.
//! * `wo`: weights minimizing `sum_l w_l sum_i eps_il^2 + P_o * sum_l (w_l
//!   var_l / K - 1)^2`, where the residuals are those of the minimizer of
//!   `F_w`, `var_l` is the sample variance of equation `l`'s residuals (`n`
//!   denominator) and `K` is the mean of `w_l var_l`. The search starts at
//!   equal weights, the `ww` weights and two further `ww` updates.
//! * `wa`: weights maximizing the cosine `H(w)` between `w` and the
//!   reciprocal residual variances of the minimizer of `F_w`.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::estimator::EstimateConfig;
use crate::model::{BoundData, Model};
use crate::objective::{Objective, Residuals};
use crate::optimizer::{maximize_on_simplex, minimize, OptimResult, OptimizerConfig};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightStrategy {
    W1,
    Wn,
    Ww,
    Wo,
    Wa,
}

impl WeightStrategy {
    pub const ALL: [WeightStrategy; 5] = [
        WeightStrategy::W1,
        WeightStrategy::Wn,
        WeightStrategy::Ww,
        WeightStrategy::Wo,
        WeightStrategy::Wa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightStrategy::W1 => "w1",
            WeightStrategy::Wn => "wn",
            WeightStrategy::Ww => "ww",
            WeightStrategy::Wo => "wo",
            WeightStrategy::Wa => "wa",
        }
    }
}

impl fmt::Display for WeightStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WeightStrategy::ALL
            .into_iter()
            .find(|w| w.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown weight strategy `{s}` (expected w1, wn, ww, wo or wa)"))
    }
}

/// Settings specific to the data-driven strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSettings {
    /// Residual variances are floored at this multiple of the mean data
    /// variance before taking reciprocals.
    pub variance_floor: f64,
    /// Extra re-weighting rounds for `ww` (0 to 3). Values above 0 iterate
    /// the reciprocal-variance update, which tends to drift towards a
    /// degenerate solution.
    pub ww_iterations: usize,
    /// Penalty constant of the `wo` self-consistency term; by default
    /// `1e3 * n * K0`, with `K0` the proportionality constant of the `ww`
    /// solution.
    pub wo_penalty: Option<f64>,
}

impl Default for WeightSettings {
    fn default() -> Self {
        WeightSettings {
            variance_floor: 1e-8,
            ww_iterations: 0,
            wo_penalty: None,
        }
    }
}

pub const MAX_WW_ITERATIONS: usize = 3;

impl WeightSettings {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::Config("variance floor must be positive".into()));
        }
        if self.ww_iterations > MAX_WW_ITERATIONS {
            return Err(Error::Config(format!(
                "ww_iterations must be at most {MAX_WW_ITERATIONS}"
            )));
        }
        if let Some(p) = self.wo_penalty {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Config("wo penalty must be positive".into()));
            }
        }
        Ok(())
    }
}

/// All-ones weights.
pub fn weights_w1(m: usize) -> Vec<f64> {
    vec![1.0; m]
}

/// `n^-L_l` for every equation.
pub fn weights_wn(model: &Model, n: usize) -> Vec<f64> {
    model
        .equations()
        .iter()
        .map(|eq| (n as f64).powi(-(eq.latent_count() as i32)))
        .collect()
}

/// Per-equation residual variances (`n` denominator).
pub fn residual_variances(res: &Residuals) -> Vec<f64> {
    (0..res.m)
        .map(|l| crate::stats::variance(&res.column(l)))
        .collect()
}

/// Reciprocals of the variances after flooring.
pub fn reciprocal_variances(variances: &[f64], floor: f64) -> Vec<f64> {
    variances.iter().map(|v| 1.0 / v.max(floor)).collect()
}

/// `H(w) = w . v / (|w| |v|)` with `v = 1/sigma^2`.
pub fn angle_criterion(weights: &[f64], sigma: &[f64]) -> f64 {
    let v: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
    cosine(weights, &v)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// Absolute variance floor for a dataset.
pub fn variance_floor(data: &BoundData, relative: f64) -> f64 {
    let scale = data.mean_variance();
    relative * if scale > 0.0 { scale } else { 1.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub label: String,
    pub weights: Vec<f64>,
    pub f_min: f64,
    pub converged: bool,
}

/// One evaluation of `H` during the `wa` search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleEvaluation {
    pub weights: Vec<f64>,
    pub h: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightOutcome {
    pub strategy: WeightStrategy,
    pub weights: Vec<f64>,
    /// Minimization at the final weights. For `wo` this is the joint
    /// minimization, restricted to the unknown vector.
    pub solution: OptimResult,
    pub stages: Vec<StageRecord>,
    /// Proportionality constant of `wo`.
    pub k: Option<f64>,
    /// `H` at the final weights (`wa`).
    pub h: Option<f64>,
    pub evaluations: Vec<AngleEvaluation>,
    pub simplex_budget_exhausted: Option<bool>,
    pub warnings: Vec<String>,
}

impl WeightOutcome {
    fn plain(
        strategy: WeightStrategy,
        weights: Vec<f64>,
        solution: OptimResult,
        stages: Vec<StageRecord>,
    ) -> Self {
        WeightOutcome {
            strategy,
            weights,
            solution,
            stages,
            k: None,
            h: None,
            evaluations: Vec::new(),
            simplex_budget_exhausted: None,
            warnings: Vec::new(),
        }
    }
}

fn solve<'a>(
    model: &'a Model,
    data: &'a BoundData,
    cfg: &EstimateConfig,
    weights: Vec<f64>,
    init: &[f64],
    optimizer: &OptimizerConfig,
) -> Result<(Objective<'a>, OptimResult), Error> {
    let obj = Objective::with_penalty(model, data, weights, cfg.penalty)?;
    let res = minimize(&obj, optimizer, init)?;
    Ok((obj, res))
}

fn stage(label: &str, weights: &[f64], r: &OptimResult) -> StageRecord {
    StageRecord {
        label: label.into(),
        weights: weights.to_vec(),
        f_min: r.value,
        converged: r.converged,
    }
}

/// Minimizes `F_w` for fixed weights.
fn fixed(
    model: &Model,
    data: &BoundData,
    cfg: &EstimateConfig,
    strategy: WeightStrategy,
    weights: Vec<f64>,
    init: &[f64],
) -> Result<WeightOutcome, Error> {
    let (_, r) = solve(model, data, cfg, weights.clone(), init, &cfg.optimizer)?;
    let stages = vec![stage(strategy.name(), &weights, &r)];
    Ok(WeightOutcome::plain(strategy, weights, r, stages))
}

/// Runs the configured strategy from the starting point `init`.
pub(crate) fn run_strategy(
    model: &Model,
    data: &BoundData,
    cfg: &EstimateConfig,
    init: &[f64],
) -> Result<WeightOutcome, Error> {
    cfg.weights.validate()?;
    match cfg.strategy {
        WeightStrategy::W1 => fixed(
            model,
            data,
            cfg,
            WeightStrategy::W1,
            weights_w1(model.n_equations()),
            init,
        ),
        WeightStrategy::Wn => fixed(
            model,
            data,
            cfg,
            WeightStrategy::Wn,
            weights_wn(model, data.n_cases()),
            init,
        ),
        WeightStrategy::Ww => two_step(model, data, cfg, init),
        WeightStrategy::Wo => self_consistent(model, data, cfg, init),
        WeightStrategy::Wa => angle(model, data, cfg, init),
    }
}

/// `ww`: reciprocal residual variances of the `wn` solution, then the final
/// minimization warm-started from it.
pub fn weights_ww(
    model: &Model,
    data: &BoundData,
    cfg: &EstimateConfig,
) -> Result<WeightOutcome, Error> {
    let init = crate::init::initial_point(model, data);
    two_step(model, data, cfg, &init)
}

/// `wo`: joint estimation of weights, `K` and unknowns, warm-started from
/// the `ww` solution.
pub fn weights_wo(
    model: &Model,
    data: &BoundData,
    cfg: &EstimateConfig,
) -> Result<WeightOutcome, Error> {
    let init = crate::init::initial_point(model, data);
    self_consistent(model, data, cfg, &init)
}

/// `wa`: maximizes `H` over the weight simplex.
pub fn weights_wa(
    model: &Model,
    data: &BoundData,
    cfg: &EstimateConfig,
) -> Result<WeightOutcome, Error> {
    let init = crate::init::initial_point(model, data);
    angle(model, data, cfg, &init)
}

fn two_step(
    model: &Model,
    data: &BoundData,
    cfg: &EstimateConfig,
    init: &[f64],
) -> Result<WeightOutcome, Error> {
    let floor = variance_floor(data, cfg.weights.variance_floor);
    let wn = weights_wn(model, data.n_cases());
    let (obj, first) = solve(model, data, cfg, wn.clone(), init, &cfg.optimizer)?;
    let mut stages = vec![stage("wn", &wn, &first)];
    let mut warnings = Vec::new();
    if !first.converged {
        warnings.push("first-stage wn minimization did not converge".to_string());
    }
    let mut weights = reciprocal_variances(&residual_variances(&obj.residuals(&first.x)?), floor);
    let mut u = first.x;
    for round in 0..cfg.weights.ww_iterations {
        let (obj, r) = solve(model, data, cfg, weights.clone(), &u, &cfg.optimizer)?;
        stages.push(stage(&format!("ww iteration {}", round + 1), &weights, &r));
        weights = reciprocal_variances(&residual_variances(&obj.residuals(&r.x)?), floor);
        u = r.x;
    }
    let (_, r) = solve(model, data, cfg, weights.clone(), &u, &cfg.optimizer)?;
    stages.push(stage("ww", &weights, &r));
    let mut out = WeightOutcome::plain(WeightStrategy::Ww, weights, r, stages);
    out.warnings = warnings;
    Ok(out)
}

/// Weights `softmax([t, 0])`.
fn softmax_weights(t: &[f64]) -> Vec<f64> {
    let top = t.iter().cloned().fold(0.0_f64, f64::max);
    let e: Vec<f64> = t
        .iter()
        .map(|v| (v - top).exp())
        .chain(std::iter::once((-top).exp()))
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// The constant `K` of `w_l = K / var_l`, taken as the mean of `w_l var_l`.
pub fn proportionality_constant(weights: &[f64], variances: &[f64]) -> f64 {
    weights
        .iter()
        .zip(variances)
        .map(|(w, v)| w * v)
        .sum::<f64>()
        / weights.len() as f64
}

/// One evaluation of the `wo` outer problem at fixed weights.
struct WoPoint {
    t: Vec<f64>,
    weights: Vec<f64>,
    u: Vec<f64>,
    /// Residual variances before flooring.
    variances: Vec<f64>,
    /// `[sqrt(P) (w_l var_l / K - 1)] ++ [sqrt(w_l sum_i eps_il^2)]`.
    residual: Vec<f64>,
    value: f64,
}

struct WoProblem<'a> {
    obj: Objective<'a>,
    inner: OptimizerConfig,
    penalty: f64,
    floor: f64,
}

impl WoProblem<'_> {
    fn eval(&self, t: &[f64], warm: &[f64]) -> Result<WoPoint, Error> {
        let weights = softmax_weights(t);
        let o = self.obj.reweighted(weights.clone())?;
        let r = minimize(&o, &self.inner, warm)?;
        let res = o.residuals(&r.x)?;
        let variances = residual_variances(&res);
        let var: Vec<f64> = variances.iter().map(|v| v + self.floor).collect();
        let k = proportionality_constant(&weights, &var);
        let sp = self.penalty.sqrt();
        let mut residual: Vec<f64> = weights
            .iter()
            .zip(&var)
            .map(|(w, v)| sp * (w * v / k - 1.0))
            .collect();
        for (l, w) in weights.iter().enumerate() {
            let ss: f64 = (0..res.n).map(|i| res.get(i, l).powi(2)).sum();
            residual.push((w * ss).sqrt());
        }
        let value = residual.iter().map(|v| v * v).sum();
        Ok(WoPoint {
            t: t.to_vec(),
            weights,
            u: r.x,
            variances,
            residual,
            value,
        })
    }
}

const WO_MAX_ITERATIONS: usize = 100;
const WO_FD_STEP: f64 = 1e-5;
/// Residual variance, relative to the mean over equations, below which an
/// equation counts as fitted exactly.
const COLLAPSE_RATIO: f64 = 1e-3;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn collapsed(variances: &[f64]) -> bool {
    variances
        .iter()
        .any(|v| *v < COLLAPSE_RATIO * mean(variances))
}

/// Reciprocal-variance updates beyond `ww` used as extra outer starts.
const WO_EXTRA_UPDATES: usize = 2;

/// Levenberg-Marquardt on the outer `wo` residuals. Returns the final point
/// and whether a tolerance (rather than the iteration cap) stopped it.
fn wo_outer(problem: &WoProblem<'_>, start: WoPoint) -> Result<(WoPoint, bool, usize), Error> {
    let dim = start.t.len();
    let mut cur = start;
    let mut lambda: Option<f64> = None;
    for iteration in 0..WO_MAX_ITERATIONS {
        let rows = cur.residual.len();
        let mut jac = nalgebra::DMatrix::<f64>::zeros(rows, dim);
        for j in 0..dim {
            let mut t = cur.t.clone();
            t[j] += WO_FD_STEP;
            let p = problem.eval(&t, &cur.u)?;
            for r in 0..rows {
                jac[(r, j)] = (p.residual[r] - cur.residual[r]) / WO_FD_STEP;
            }
        }
        let res = nalgebra::DVector::from_column_slice(&cur.residual);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        if jtr.norm() <= 1e-10 * (1.0 + cur.value) {
            return Ok((cur, true, iteration));
        }
        let mu = lambda.get_or_insert_with(|| 1e-3 * jtj.diagonal().max().max(f64::MIN_POSITIVE));
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for d in 0..dim {
                a[(d, d)] += *mu * jtj[(d, d)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                *mu *= 4.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let t: Vec<f64> = cur.t.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let trial = problem.eval(&t, &cur.u)?;
            if trial.value < cur.value {
                let decrease = cur.value - trial.value;
                let small_step =
                    step.norm() <= 1e-10 * (1.0 + cur.t.iter().map(|v| v * v).sum::<f64>().sqrt());
                cur = trial;
                *mu = (*mu / 3.0).max(1e-15);
                accepted = true;
                if decrease <= 1e-14 * cur.value.max(f64::MIN_POSITIVE) || small_step {
                    return Ok((cur, true, iteration + 1));
                }
                break;
            }
            *mu *= 4.0;
        }
        if !accepted {
            // no damping level decreases the objective: a stationary point
            // up to the accuracy of the inner solutions
            return Ok((cur, true, iteration + 1));
        }
    }
    Ok((cur, false, WO_MAX_ITERATIONS))
}

fn self_consistent(
    model: &Model,
    data: &BoundData,
    cfg: &EstimateConfig,
    init: &[f64],
) -> Result<WeightOutcome, Error> {
    let warm = two_step(model, data, cfg, init)?;
    let floor = variance_floor(data, cfg.weights.variance_floor);
    let m = model.n_equations();
    let n = data.n_cases();
    let w0 = normalized(&warm.weights);
    let obj = Objective::with_penalty(model, data, w0.clone(), cfg.penalty)?;
    let var0: Vec<f64> = residual_variances(&obj.residuals(&warm.solution.x)?)
        .iter()
        .map(|v| v + floor)
        .collect();
    let k0 = proportionality_constant(&w0, &var0);
    // the relative gap |w_l var_l / K - 1| is about n K / (2 P) at the
    // optimum, so this keeps it near 5e-4
    let penalty = cfg.weights.wo_penalty.unwrap_or(1e3 * n as f64 * k0);
    debug!("wo penalty constant {penalty:.3e}, K0 {k0:.3e}");
    let mut stages = warm.stages.clone();
    let mut warnings = warm.warnings.clone();
    if m == 1 {
        let mut out = WeightOutcome::plain(WeightStrategy::Wo, vec![1.0], warm.solution, stages);
        out.k = Some(var0[0]);
        out.warnings = warnings;
        return Ok(out);
    }

    let inner = OptimizerConfig {
        multistart: 1,
        ..cfg.optimizer.clone()
    };
    let problem = WoProblem {
        obj,
        inner,
        penalty,
        floor,
    };
    // the self-consistency equations can have several roots; search from
    // equal weights, the ww weights and two further reciprocal-variance
    // updates, and keep the lowest outer objective
    let mut starts = vec![vec![1.0 / m as f64; m], w0.clone()];
    let mut u = warm.solution.x.clone();
    for _ in 0..WO_EXTRA_UPDATES {
        let o = problem
            .obj
            .reweighted(starts.last().expect("non-empty").clone())?;
        u = minimize(&o, &problem.inner, &u)?.x;
        let var = residual_variances(&o.residuals(&u)?);
        starts.push(normalized(&reciprocal_variances(&var, floor)));
    }
    let mut best: Option<(WoPoint, bool)> = None;
    for w in starts {
        let last = w[m - 1].ln();
        let t0: Vec<f64> = w[..m - 1].iter().map(|v| v.ln() - last).collect();
        let start = problem.eval(&t0, &warm.solution.x)?;
        let (point, converged, iterations) = wo_outer(&problem, start)?;
        debug!(
            "wo outer search stopped after {iterations} iterations at {:.6e}",
            point.value
        );
        // a collapsed root (one equation fitted exactly, carrying all the
        // weight) solves the floored equations with F near zero; any
        // non-collapsed root is preferred over it
        let rank = |p: &WoPoint| (collapsed(&p.variances), p.value);
        if best.as_ref().is_none_or(|(b, _)| rank(&point) < rank(b)) {
            best = Some((point, converged));
        }
    }
    let (point, outer_converged) = best.expect("at least one outer start");
    if !outer_converged {
        warnings.push(format!(
            "wo weight search stopped after {WO_MAX_ITERATIONS} iterations"
        ));
    }

    let weights = point.weights;
    let (obj, r) = solve(model, data, cfg, weights.clone(), &point.u, &cfg.optimizer)?;
    let var = residual_variances(&obj.residuals(&r.x)?);
    for (l, (wl, vl)) in weights.iter().zip(&var).enumerate() {
        if *vl < COLLAPSE_RATIO * mean(&var) {
            let msg = format!(
                "wo weights collapsed: equation `{}` has weight {wl:.2e} and near-zero residual variance",
                model.equations()[l].label
            );
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    stages.push(StageRecord {
        label: "wo".into(),
        weights: weights.clone(),
        f_min: r.value,
        converged: r.converged && outer_converged,
    });
    let k = proportionality_constant(&weights, &var.iter().map(|v| v + floor).collect::<Vec<_>>());
    let converged = r.converged && outer_converged;
    let solution = OptimResult { converged, ..r };
    Ok(WeightOutcome {
        strategy: WeightStrategy::Wo,
        weights,
        solution,
        stages,
        k: Some(k),
        h: None,
        evaluations: Vec::new(),
        simplex_budget_exhausted: None,
        warnings,
    })
}

fn angle(
    model: &Model,
    data: &BoundData,
    cfg: &EstimateConfig,
    init: &[f64],
) -> Result<WeightOutcome, Error> {
    let m = model.n_equations();
    let floor = variance_floor(data, cfg.weights.variance_floor);
    let wn = weights_wn(model, data.n_cases());
    let (obj, first) = solve(model, data, cfg, wn.clone(), init, &cfg.optimizer)?;
    let mut stages = vec![stage("wn", &wn, &first)];
    if m == 1 {
        let mut out = WeightOutcome::plain(WeightStrategy::Wa, vec![1.0], first, stages);
        out.h = Some(1.0);
        return Ok(out);
    }
    let base = first.x.clone();
    let start = normalized(&reciprocal_variances(
        &residual_variances(&obj.residuals(&base)?),
        floor,
    ));
    let inner_cfg = OptimizerConfig {
        multistart: 1,
        ..cfg.optimizer.clone()
    };
    let mut evaluations: Vec<AngleEvaluation> = Vec::new();
    let h = |w: &[f64]| -> f64 {
        let outcome = obj
            .reweighted(w.to_vec())
            .map_err(Error::from)
            .and_then(|o| {
                let r = minimize(&o, &inner_cfg, &base)?;
                let var = residual_variances(&o.residuals(&r.x)?);
                Ok((r.converged, var))
            });
        let (h, converged) = match outcome {
            Ok((true, var)) => (cosine(w, &reciprocal_variances(&var, floor)), true),
            Ok((false, _)) => {
                debug!("wa inner minimization did not converge; H set to -1");
                (-1.0, false)
            }
            Err(e) => {
                debug!("wa inner minimization failed: {e}; H set to -1");
                (-1.0, false)
            }
        };
        evaluations.push(AngleEvaluation {
            weights: w.to_vec(),
            h,
            converged,
        });
        h
    };
    let best = maximize_on_simplex(
        h,
        m,
        cfg.optimizer.simplex_budget,
        Some(&start),
        cfg.optimizer.seed,
    );
    let weights = best.weights;
    let (obj, r) = solve(model, data, cfg, weights.clone(), &base, &cfg.optimizer)?;
    let var = residual_variances(&obj.residuals(&r.x)?);
    let h_final = cosine(&weights, &reciprocal_variances(&var, floor));
    stages.push(stage("wa", &weights, &r));
    let mut warnings = Vec::new();
    let failed = evaluations.iter().filter(|e| !e.converged).count();
    if failed > 0 {
        warnings.push(format!(
            "{failed} of {} wa inner minimizations did not converge",
            evaluations.len()
        ));
    }
    if best.budget_exhausted {
        warnings.push("wa simplex search stopped at its evaluation budget".into());
    }
    Ok(WeightOutcome {
        strategy: WeightStrategy::Wa,
        weights,
        solution: r,
        stages,
        k: None,
        h: Some(h_final),
        evaluations,
        simplex_budget_exhausted: Some(best.budget_exhausted),
        warnings,
    })
}
