//! The weighted least-squares objective over parameters and latent scores.
//!
//! For an unknown vector `u` (free parameters, then scores case-major) the
//! objective is
//!
//! ```text
//! F(u) = sum_l w_l * sum_i eps[i,l]^2  +  sum_c P_c * s_c(u)^2  +  gauge(u)
//! ```
//!
//! where `eps[i,l]` is equation `l`'s residual at case `i` and `s_c` is the
//! sum defining a soft constraint. Hard `center`/`normalize` constraints are
//! enforced by mapping the raw score column through a projection (and a
//! rescaling for `normalize`) before the equations are evaluated; a small
//! gauge term pins the raw column to its projection so that the minimizer
//! stays isolated.

use thiserror::Error;

use crate::expr::{CaseBindings, SymbolKind};
use crate::model::{BoundData, ConstraintKind, ConstraintMode, Model, UnknownLayout};
use crate::optimizer::Differentiable;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("equation `{label}` is non-finite at case {case}")]
    NonFinite { label: String, case: usize },
    #[error("unknown vector has length {found}, expected {expected}")]
    Length { expected: usize, found: usize },
    #[error("expected {expected} weights, got {found}")]
    Weights { expected: usize, found: usize },
    #[error("weights must be positive and finite")]
    BadWeight,
    #[error("data has {found} manifest columns, model needs {expected}")]
    DataShape { expected: usize, found: usize },
}

/// Residual matrix, row-major `n x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub n: usize,
    pub m: usize,
    pub values: Vec<f64>,
}

impl Residuals {
    #[inline]
    pub fn get(&self, case: usize, eq: usize) -> f64 {
        self.values[case * self.m + eq]
    }

    pub fn column(&self, eq: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, eq)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks(self.m.max(1))
            .map(<[f64]>::to_vec)
            .collect()
    }
}

/// Default soft-constraint penalty: `1e3 * m * n * mean(A^2)`.
pub fn default_penalty(model: &Model, data: &BoundData) -> f64 {
    let scale = data.mean_square();
    let scale = if scale > 0.0 { scale } else { 1.0 };
    1e3 * model.n_equations() as f64 * data.n_cases() as f64 * scale
}

#[derive(Debug, Clone, Copy)]
struct Penalty {
    kind: ConstraintKind,
    weight: f64,
}

/// Evaluated model quantities at one unknown vector.
#[derive(Debug, Clone)]
pub(crate) struct State {
    pub params: Vec<f64>,
    /// Effective scores after hard transforms, `n x Q` row-major.
    pub scores: Vec<f64>,
    pub eps: Residuals,
}

#[derive(Debug, Clone)]
pub struct Objective<'a> {
    model: &'a Model,
    data: &'a BoundData,
    layout: UnknownLayout,
    /// Slot in the unknown vector for every parameter, `None` when fixed.
    param_slot: Vec<Option<usize>>,
    weights: Vec<f64>,
    penalties: Vec<Penalty>,
    hard_center: Vec<bool>,
    hard_normalize: Vec<bool>,
    gauge: f64,
}

impl<'a> Objective<'a> {
    /// Objective with the given equation weights and the default penalty for
    /// soft constraints that do not name their own.
    pub fn new(
        model: &'a Model,
        data: &'a BoundData,
        weights: Vec<f64>,
    ) -> Result<Self, ObjectiveError> {
        Self::with_penalty(model, data, weights, None)
    }

    pub fn with_penalty(
        model: &'a Model,
        data: &'a BoundData,
        weights: Vec<f64>,
        penalty: Option<f64>,
    ) -> Result<Self, ObjectiveError> {
        if weights.len() != model.n_equations() {
            return Err(ObjectiveError::Weights {
                expected: model.n_equations(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(ObjectiveError::BadWeight);
        }
        if data.n_manifest() != model.n_manifest() {
            return Err(ObjectiveError::DataShape {
                expected: model.n_manifest(),
                found: data.n_manifest(),
            });
        }
        let default = penalty.unwrap_or_else(|| default_penalty(model, data));
        let penalties = model
            .constraints()
            .iter()
            .filter_map(|c| match c.mode {
                ConstraintMode::Soft(p) => Some(Penalty {
                    kind: c.kind,
                    weight: p.unwrap_or(default),
                }),
                ConstraintMode::Hard => None,
            })
            .collect();
        let q = model.n_latent();
        let free = model.free_params();
        let mut param_slot = vec![None; model.params().len()];
        for (slot, &s) in free.iter().enumerate() {
            param_slot[s] = Some(slot);
        }
        let gauge = weights.iter().sum::<f64>() / weights.len() as f64;
        Ok(Objective {
            model,
            data,
            layout: crate::model::free_unknowns(model, data.n_cases()),
            param_slot,
            weights,
            penalties,
            hard_center: (0..q).map(|k| model.hard_center(k)).collect(),
            hard_normalize: (0..q).map(|k| model.hard_normalize(k)).collect(),
            gauge,
        })
    }

    pub fn model(&self) -> &'a Model {
        self.model
    }

    pub fn data(&self) -> &'a BoundData {
        self.data
    }

    pub fn layout(&self) -> UnknownLayout {
        self.layout
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Penalty constants of the active soft constraints.
    pub fn penalty_weights(&self) -> Vec<f64> {
        self.penalties.iter().map(|p| p.weight).collect()
    }

    /// Same model, data and penalties with other equation weights.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self, ObjectiveError> {
        if weights.len() != self.weights.len() {
            return Err(ObjectiveError::Weights {
                expected: self.weights.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(ObjectiveError::BadWeight);
        }
        let mut out = self.clone();
        out.gauge = weights.iter().sum::<f64>() / weights.len() as f64;
        out.weights = weights;
        Ok(out)
    }

    fn check_len(&self, u: &[f64]) -> Result<(), ObjectiveError> {
        if u.len() != self.layout.len() {
            return Err(ObjectiveError::Length {
                expected: self.layout.len(),
                found: u.len(),
            });
        }
        Ok(())
    }

    /// Full parameter vector (fixed values included) encoded in `u`.
    pub fn params_of(&self, u: &[f64]) -> Vec<f64> {
        self.model.full_params(self.layout.params(u))
    }

    /// Effective latent scores (`n x Q` row-major) encoded in `u`.
    pub fn scores_of(&self, u: &[f64]) -> Vec<f64> {
        let lay = self.layout;
        let (n, q) = (lay.n_cases, lay.n_latent);
        let mut z = lay.scores(u).to_vec();
        for k in 0..q {
            if !(self.hard_center[k] || self.hard_normalize[k]) {
                continue;
            }
            let mut col: Vec<f64> = (0..n).map(|i| z[i * q + k]).collect();
            if self.hard_center[k] {
                let m = crate::stats::mean(&col);
                col.iter_mut().for_each(|v| *v -= m);
            }
            if self.hard_normalize[k] {
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = (n as f64).sqrt() / norm;
                col.iter_mut().for_each(|v| *v *= s);
            }
            for i in 0..n {
                z[i * q + k] = col[i];
            }
        }
        z
    }

    pub(crate) fn state(&self, u: &[f64]) -> Result<State, ObjectiveError> {
        self.check_len(u)?;
        let params = self.params_of(u);
        let scores = self.scores_of(u);
        let (n, q, m) = (
            self.layout.n_cases,
            self.layout.n_latent,
            self.weights.len(),
        );
        let mut eps = vec![0.0; n * m];
        let mut scratch = Vec::new();
        for i in 0..n {
            let b = CaseBindings {
                manifest: self.data.row(i),
                latent: &scores[i * q..(i + 1) * q],
                params: &params,
            };
            for (l, tape) in self.model.tapes().iter().enumerate() {
                let v = tape.forward(&b, &mut scratch);
                if !v.is_finite() {
                    return Err(ObjectiveError::NonFinite {
                        label: self.model.equations()[l].label.clone(),
                        case: i,
                    });
                }
                eps[i * m + l] = v;
            }
        }
        Ok(State {
            params,
            scores,
            eps: Residuals { n, m, values: eps },
        })
    }

    pub fn residuals(&self, u: &[f64]) -> Result<Residuals, ObjectiveError> {
        Ok(self.state(u)?.eps)
    }

    pub fn value(&self, u: &[f64]) -> Result<f64, ObjectiveError> {
        let st = self.state(u)?;
        let mut f = self.weighted_sum(&st.eps);
        f += self.constraint_value(u, &st);
        Ok(f)
    }

    pub fn gradient(&self, u: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
        Ok(self.value_and_gradient(u)?.1)
    }

    pub fn value_and_gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        let st = self.state(u)?;
        let m = self.weights.len();
        let mut adj_eps: Vec<f64> = st
            .eps
            .values
            .iter()
            .enumerate()
            .map(|(k, e)| 2.0 * self.weights[k % m] * e)
            .collect();
        let mut adj_z = vec![0.0; st.scores.len()];
        let mut grad = vec![0.0; u.len()];
        let mut f = self.weighted_sum(&st.eps);
        f += self.constraint_terms(u, &st, &mut adj_eps, &mut adj_z, &mut grad);
        self.backprop(u, &st, &adj_eps, &adj_z, &mut grad);
        Ok((f, grad))
    }

    /// `sum_l w_l sum_i eps^2`.
    pub fn weighted_sum(&self, eps: &Residuals) -> f64 {
        let m = self.weights.len();
        eps.values
            .iter()
            .enumerate()
            .map(|(k, e)| self.weights[k % m] * e * e)
            .sum()
    }

    /// Soft-constraint penalty sums `s_c` at the evaluated state.
    fn constraint_sums(&self, st: &State) -> Vec<f64> {
        let (n, q) = (self.layout.n_cases, self.layout.n_latent);
        self.penalties
            .iter()
            .map(|p| match p.kind {
                ConstraintKind::Center(k) => (0..n).map(|i| st.scores[i * q + k]).sum(),
                ConstraintKind::Normalize(k) => {
                    (0..n).map(|i| st.scores[i * q + k].powi(2)).sum::<f64>() - n as f64
                }
                ConstraintKind::ZeroErrorCov(a, b) => {
                    (0..n).map(|i| st.eps.get(i, a) * st.eps.get(i, b)).sum()
                }
                ConstraintKind::ZeroLatentErrorCov(k, l) => (0..n)
                    .map(|i| st.scores[i * q + k] * st.eps.get(i, l))
                    .sum(),
            })
            .collect()
    }

    fn gauge_value(&self, u: &[f64]) -> f64 {
        let lay = self.layout;
        let n = lay.n_cases as f64;
        let mut g = 0.0;
        for k in 0..lay.n_latent {
            if !(self.hard_center[k] || self.hard_normalize[k]) {
                continue;
            }
            let col: Vec<f64> = (0..lay.n_cases).map(|i| u[lay.latent(i, k)]).collect();
            let sum: f64 = col.iter().sum();
            if self.hard_center[k] {
                g += sum * sum / n;
            }
            if self.hard_normalize[k] {
                let mean = if self.hard_center[k] { sum / n } else { 0.0 };
                let sq: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
                g += (sq - n).powi(2) / n;
            }
        }
        self.gauge * g
    }

    /// Penalty and gauge contribution to the value, excluding the weighted
    /// residual sum.
    pub(crate) fn constraint_value(&self, u: &[f64], st: &State) -> f64 {
        let sums = self.constraint_sums(st);
        let pen: f64 = self
            .penalties
            .iter()
            .zip(&sums)
            .map(|(p, s)| p.weight * s * s)
            .sum();
        pen + self.gauge_value(u)
    }

    /// Adds penalty adjoints to `adj_eps`/`adj_z` and the gauge gradient to
    /// `grad`; returns the penalty plus gauge value.
    pub(crate) fn constraint_terms(
        &self,
        u: &[f64],
        st: &State,
        adj_eps: &mut [f64],
        adj_z: &mut [f64],
        grad: &mut [f64],
    ) -> f64 {
        let (n, q, m) = (
            self.layout.n_cases,
            self.layout.n_latent,
            self.weights.len(),
        );
        let sums = self.constraint_sums(st);
        let mut value = 0.0;
        for (p, &s) in self.penalties.iter().zip(&sums) {
            value += p.weight * s * s;
            let c = 2.0 * p.weight * s;
            match p.kind {
                ConstraintKind::Center(k) => {
                    for i in 0..n {
                        adj_z[i * q + k] += c;
                    }
                }
                ConstraintKind::Normalize(k) => {
                    for i in 0..n {
                        adj_z[i * q + k] += c * 2.0 * st.scores[i * q + k];
                    }
                }
                ConstraintKind::ZeroErrorCov(a, b) => {
                    for i in 0..n {
                        adj_eps[i * m + a] += c * st.eps.get(i, b);
                        adj_eps[i * m + b] += c * st.eps.get(i, a);
                    }
                }
                ConstraintKind::ZeroLatentErrorCov(k, l) => {
                    for i in 0..n {
                        adj_z[i * q + k] += c * st.eps.get(i, l);
                        adj_eps[i * m + l] += c * st.scores[i * q + k];
                    }
                }
            }
        }
        // gauge
        let lay = self.layout;
        let nf = n as f64;
        for k in 0..q {
            if !(self.hard_center[k] || self.hard_normalize[k]) {
                continue;
            }
            let sum: f64 = (0..n).map(|i| u[lay.latent(i, k)]).sum();
            if self.hard_center[k] {
                value += self.gauge * sum * sum / nf;
                for i in 0..n {
                    grad[lay.latent(i, k)] += self.gauge * 2.0 * sum / nf;
                }
            }
            if self.hard_normalize[k] {
                let mean = if self.hard_center[k] { sum / nf } else { 0.0 };
                let sq: f64 = (0..n).map(|i| (u[lay.latent(i, k)] - mean).powi(2)).sum();
                value += self.gauge * (sq - nf).powi(2) / nf;
                let c = self.gauge * 2.0 * (sq - nf) / nf;
                for i in 0..n {
                    // d(sq)/du_i = 2 (u_i - mean); the mean's own derivative sums to zero
                    grad[lay.latent(i, k)] += c * 2.0 * (u[lay.latent(i, k)] - mean);
                }
            }
        }
        value
    }

    /// Chain rule from residual and score adjoints back to the unknown
    /// vector; accumulates into `grad`.
    pub(crate) fn backprop(
        &self,
        u: &[f64],
        st: &State,
        adj_eps: &[f64],
        adj_z: &[f64],
        grad: &mut [f64],
    ) {
        let lay = self.layout;
        let (n, q, m) = (lay.n_cases, lay.n_latent, self.weights.len());
        let mut dz = adj_z.to_vec();
        let mut dparam = vec![0.0; st.params.len()];
        let mut values = Vec::new();
        let mut adj = Vec::new();
        for i in 0..n {
            let b = CaseBindings {
                manifest: self.data.row(i),
                latent: &st.scores[i * q..(i + 1) * q],
                params: &st.params,
            };
            let (dz_row, _) = dz[i * q..].split_at_mut(q);
            for (l, tape) in self.model.tapes().iter().enumerate() {
                let seed = adj_eps[i * m + l];
                if seed == 0.0 {
                    continue;
                }
                tape.forward(&b, &mut values);
                tape.reverse(&values, seed, &mut adj, |s, d| match s.kind {
                    SymbolKind::Latent => dz_row[s.index] += d,
                    SymbolKind::Param => dparam[s.index] += d,
                    SymbolKind::Manifest => {}
                });
            }
        }
        for (s, slot) in self.param_slot.iter().enumerate() {
            if let Some(slot) = slot {
                grad[lay.param(*slot)] += dparam[s];
            }
        }
        for k in 0..q {
            if !(self.hard_center[k] || self.hard_normalize[k]) {
                for i in 0..n {
                    grad[lay.latent(i, k)] += dz[i * q + k];
                }
                continue;
            }
            let mut g: Vec<f64> = (0..n).map(|i| dz[i * q + k]).collect();
            if self.hard_normalize[k] {
                // Z = sqrt(n) c / |c|
                let mut c: Vec<f64> = (0..n).map(|i| u[lay.latent(i, k)]).collect();
                if self.hard_center[k] {
                    let mc = crate::stats::mean(&c);
                    c.iter_mut().for_each(|v| *v -= mc);
                }
                let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = c.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
                let scale = (n as f64).sqrt() / norm;
                for (gi, ci) in g.iter_mut().zip(&c) {
                    *gi = scale * (*gi - ci * dot);
                }
            }
            if self.hard_center[k] {
                let mg = crate::stats::mean(&g);
                g.iter_mut().for_each(|v| *v -= mg);
            }
            for i in 0..n {
                grad[lay.latent(i, k)] += g[i];
            }
        }
    }
}

impl Objective<'_> {
    /// Gauss-Newton approximation `2 J^T J` of the Hessian, where `J` stacks
    /// the Jacobians of the weighted residuals, the penalty sums and the gauge
    /// terms with respect to the unknown vector.
    pub(crate) fn gauss_newton(&self, u: &[f64]) -> Result<nalgebra::DMatrix<f64>, ObjectiveError> {
        use nalgebra::DMatrix;

        let st = self.state(u)?;
        let lay = self.layout;
        let (n, q, m) = (lay.n_cases, lay.n_latent, self.weights.len());
        let dim = lay.len();

        // Sparse gradient of every residual with respect to parameters and
        // the case's effective scores.
        let mut grads: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n * m);
        let mut values = Vec::new();
        let mut adj = Vec::new();
        for i in 0..n {
            let b = CaseBindings {
                manifest: self.data.row(i),
                latent: &st.scores[i * q..(i + 1) * q],
                params: &st.params,
            };
            for tape in self.model.tapes() {
                tape.forward(&b, &mut values);
                let mut entries: Vec<(usize, f64)> = Vec::new();
                tape.reverse(&values, 1.0, &mut adj, |s, d| match s.kind {
                    SymbolKind::Latent => entries.push((lay.latent(i, s.index), d)),
                    SymbolKind::Param => {
                        if let Some(slot) = self.param_slot[s.index] {
                            entries.push((lay.param(slot), d));
                        }
                    }
                    SymbolKind::Manifest => {}
                });
                grads.push(entries);
            }
        }

        let mut hz = DMatrix::<f64>::zeros(dim, dim);
        let add_sparse = |entries: &[(usize, f64)], scale: f64, h: &mut DMatrix<f64>| {
            for &(a, da) in entries {
                for &(b, db) in entries {
                    h[(a, b)] += scale * da * db;
                }
            }
        };
        for (k, g) in grads.iter().enumerate() {
            add_sparse(g, 2.0 * self.weights[k % m], &mut hz);
        }
        for p in &self.penalties {
            let mut row = vec![0.0; dim];
            match p.kind {
                ConstraintKind::Center(k) => (0..n).for_each(|i| row[lay.latent(i, k)] += 1.0),
                ConstraintKind::Normalize(k) => {
                    (0..n).for_each(|i| row[lay.latent(i, k)] += 2.0 * st.scores[i * q + k])
                }
                ConstraintKind::ZeroErrorCov(a, b) => {
                    for i in 0..n {
                        for &(j, d) in &grads[i * m + a] {
                            row[j] += st.eps.get(i, b) * d;
                        }
                        for &(j, d) in &grads[i * m + b] {
                            row[j] += st.eps.get(i, a) * d;
                        }
                    }
                }
                ConstraintKind::ZeroLatentErrorCov(k, l) => {
                    for i in 0..n {
                        row[lay.latent(i, k)] += st.eps.get(i, l);
                        for &(j, d) in &grads[i * m + l] {
                            row[j] += st.scores[i * q + k] * d;
                        }
                    }
                }
            }
            let entries: Vec<(usize, f64)> = row
                .into_iter()
                .enumerate()
                .filter(|(_, v)| *v != 0.0)
                .collect();
            add_sparse(&entries, 2.0 * p.weight, &mut hz);
        }

        let hard: Vec<usize> = (0..q)
            .filter(|&k| self.hard_center[k] || self.hard_normalize[k])
            .collect();
        if hard.is_empty() {
            return Ok(hz);
        }
        // Jacobian of effective scores with respect to raw unknowns.
        let mut t = DMatrix::<f64>::identity(dim, dim);
        let nf = n as f64;
        for &k in &hard {
            let idx: Vec<usize> = (0..n).map(|i| lay.latent(i, k)).collect();
            let mut block = DMatrix::<f64>::identity(n, n);
            if self.hard_center[k] {
                block -= DMatrix::<f64>::from_element(n, n, 1.0 / nf);
            }
            if self.hard_normalize[k] {
                let mut c: Vec<f64> = idx.iter().map(|&j| u[j]).collect();
                if self.hard_center[k] {
                    let mc = crate::stats::mean(&c);
                    c.iter_mut().for_each(|v| *v -= mc);
                }
                let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                let chat = nalgebra::DVector::from_iterator(n, c.iter().map(|v| v / norm));
                let proj = DMatrix::<f64>::identity(n, n) - &chat * chat.transpose();
                block = proj * block * (nf.sqrt() / norm);
            }
            for (a, &ia) in idx.iter().enumerate() {
                for (b, &ib) in idx.iter().enumerate() {
                    t[(ia, ib)] = block[(a, b)];
                }
            }
        }
        let mut h = t.transpose() * hz * &t;

        for &k in &hard {
            let idx: Vec<usize> = (0..n).map(|i| lay.latent(i, k)).collect();
            let c = (self.gauge / nf).sqrt();
            if self.hard_center[k] {
                let entries: Vec<(usize, f64)> = idx.iter().map(|&j| (j, c)).collect();
                add_sparse(&entries, 2.0, &mut h);
            }
            if self.hard_normalize[k] {
                let col: Vec<f64> = idx.iter().map(|&j| u[j]).collect();
                let mean = if self.hard_center[k] {
                    crate::stats::mean(&col)
                } else {
                    0.0
                };
                let entries: Vec<(usize, f64)> = idx
                    .iter()
                    .zip(&col)
                    .map(|(&j, v)| (j, c * 2.0 * (v - mean)))
                    .collect();
                add_sparse(&entries, 2.0, &mut h);
            }
        }
        Ok(h)
    }
}

impl Differentiable for Objective<'_> {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        Objective::value_and_gradient(self, x).ok()
    }

    fn value(&self, x: &[f64]) -> Option<f64> {
        Objective::value(self, x).ok()
    }
}
