//! Limited-memory BFGS with a bracketing line search.
//!
//! The search direction comes from the usual two-loop recursion over the last
//! `memory` curvature pairs. Step lengths start at 1 (scaled on the first
//! iteration), backtrack until the sufficient-decrease condition holds and
//! extrapolate while the directional derivative is still strongly negative,
//! i.e. the step satisfies the strong Wolfe conditions whenever the function
//! is smooth along the ray. At kinks the search falls back to the best point
//! with sufficient decrease.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::Differentiable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Gradient norm fell below the relative tolerance.
    GradientTolerance,
    /// Successive objective values stopped changing.
    FunctionTolerance,
    /// No step along the current direction decreased the objective.
    LineSearchFailed,
    MaxIterations,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(
            self,
            Termination::GradientTolerance | Termination::FunctionTolerance
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsSettings {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn direction(g: &[f64], pairs: &VecDeque<Pair>) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut alpha = vec![0.0; pairs.len()];
    for (k, p) in pairs.iter().enumerate().rev() {
        alpha[k] = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= alpha[k] * yi;
        }
    }
    if let Some(last) = pairs.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (k, p) in pairs.iter().enumerate() {
        let beta = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (alpha[k] - beta) * si;
        }
    }
    q
}

struct Trial {
    step: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

struct LineSearch<'a, P: Differentiable + ?Sized> {
    problem: &'a P,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    evaluations: usize,
}

impl<P: Differentiable + ?Sized> LineSearch<'_, P> {
    fn eval(&mut self, step: f64) -> Option<Trial> {
        let x: Vec<f64> = self
            .x
            .iter()
            .zip(self.d)
            .map(|(a, b)| a + step * b)
            .collect();
        self.evaluations += 1;
        let (f, g) = self.problem.value_and_gradient(&x)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Trial { step, x, f, g })
    }

    fn armijo(&self, t: &Trial) -> bool {
        t.f <= self.f0 + self.c1 * t.step * self.slope0
    }

    fn curvature_ok(&self, t: &Trial) -> bool {
        dot(&t.g, self.d).abs() <= -self.c2 * self.slope0
    }

    /// Returns an acceptable trial, or `None` when no step decreased the
    /// objective.
    fn run(&mut self, initial: f64, budget: usize) -> Option<Trial> {
        let mut best: Option<Trial> = None;
        let keep = |best: &mut Option<Trial>, t: &Trial, ok: bool| {
            if ok && best.as_ref().is_none_or(|b| t.f < b.f) {
                *best = Some(Trial {
                    step: t.step,
                    x: t.x.clone(),
                    f: t.f,
                    g: t.g.clone(),
                });
            }
        };

        let mut lo_step = 0.0;
        let mut lo_f = self.f0;
        let mut lo_slope = self.slope0;
        let mut step = initial;
        let mut used = 0;
        let (hi_step, hi_f, hi_slope);
        loop {
            if used >= budget {
                return best;
            }
            used += 1;
            let Some(t) = self.eval(step) else {
                // Non-finite: treat as overshoot and shrink towards the last good step.
                step = lo_step + 0.25 * (step - lo_step);
                continue;
            };
            let slope = dot(&t.g, self.d);
            if !self.armijo(&t) || (lo_step > 0.0 && t.f >= lo_f) {
                hi_step = t.step;
                hi_f = t.f;
                hi_slope = slope;
                break;
            }
            keep(&mut best, &t, true);
            if self.curvature_ok(&t) {
                return Some(t);
            }
            if slope >= 0.0 {
                hi_step = lo_step;
                hi_f = lo_f;
                hi_slope = lo_slope;
                lo_step = t.step;
                lo_f = t.f;
                lo_slope = slope;
                break;
            }
            lo_step = t.step;
            lo_f = t.f;
            lo_slope = slope;
            step *= 2.5;
        }

        // zoom between lo (sufficient decrease) and hi
        let (mut a_lo, mut f_lo, mut s_lo) = (lo_step, lo_f, lo_slope);
        let (mut a_hi, mut f_hi, mut s_hi) = (hi_step, hi_f, hi_slope);
        while used < budget {
            used += 1;
            let width = (a_hi - a_lo).abs();
            if width <= 1e-16 * a_lo.abs().max(a_hi.abs()).max(1e-300) {
                break;
            }
            let mut a = cubic_min(a_lo, f_lo, s_lo, a_hi, f_hi, s_hi);
            let (left, right) = if a_lo < a_hi {
                (a_lo, a_hi)
            } else {
                (a_hi, a_lo)
            };
            let margin = 0.1 * width;
            if !a.is_finite() || a < left + margin || a > right - margin {
                a = 0.5 * (a_lo + a_hi);
            }
            let Some(t) = self.eval(a) else {
                a_hi = a;
                f_hi = f64::INFINITY;
                s_hi = f64::NAN;
                continue;
            };
            let slope = dot(&t.g, self.d);
            if !self.armijo(&t) || t.f >= f_lo {
                a_hi = a;
                f_hi = t.f;
                s_hi = slope;
            } else {
                keep(&mut best, &t, true);
                if self.curvature_ok(&t) {
                    return Some(t);
                }
                if slope * (a_hi - a_lo) >= 0.0 {
                    a_hi = a_lo;
                    f_hi = f_lo;
                    s_hi = s_lo;
                }
                a_lo = a;
                f_lo = t.f;
                s_lo = slope;
            }
        }
        best
    }
}

/// Minimizer of the cubic interpolating values and slopes at two points.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    if !(fa.is_finite() && fb.is_finite() && da.is_finite() && db.is_finite()) {
        return f64::NAN;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return f64::NAN;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2)
}

pub fn lbfgs<P: Differentiable + ?Sized>(
    problem: &P,
    x0: &[f64],
    settings: &LbfgsSettings,
) -> Option<LocalResult> {
    let (mut f, mut g) = problem.value_and_gradient(x0)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut x = x0.to_vec();
    let mut evaluations = 1;
    let g0 = norm(&g);
    let tol = settings.grad_tol * g0.max(f64::MIN_POSITIVE);
    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(settings.memory);
    let mut iterations = 0;
    let mut stalls = 0;

    let termination = loop {
        let gn = norm(&g);
        if gn <= tol || gn == 0.0 {
            break Termination::GradientTolerance;
        }
        if iterations >= settings.max_iter {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let mut d = direction(&g, &pairs);
        let mut slope = dot(&g, &d);
        if slope.is_nan() || slope >= 0.0 {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gn * gn;
        }
        let initial = if pairs.is_empty() {
            (1.0 / norm(&d)).min(1.0)
        } else {
            1.0
        };
        let mut search = LineSearch {
            problem,
            x: &x,
            d: &d,
            f0: f,
            slope0: slope,
            c1: settings.c1,
            c2: settings.c2,
            evaluations: 0,
        };
        let trial = search.run(initial, settings.max_line_search);
        evaluations += search.evaluations;
        let Some(t) = trial else {
            if pairs.is_empty() {
                break Termination::LineSearchFailed;
            }
            // retry from steepest descent with a fresh model
            pairs.clear();
            continue;
        };

        let s: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = t.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if pairs.len() == settings.memory {
                pairs.pop_front();
            }
            pairs.push_back(Pair {
                s,
                y,
                rho: 1.0 / sy,
            });
        }
        let decrease = f - t.f;
        x = t.x;
        g = t.g;
        let f_prev = f;
        f = t.f;
        if decrease <= settings.f_tol * f_prev.abs().max(f.abs()) {
            stalls += 1;
            if stalls >= 3 {
                break Termination::FunctionTolerance;
            }
        } else {
            stalls = 0;
        }
    };

    Some(LocalResult {
        grad_norm: norm(&g),
        x,
        value: f,
        iterations,
        evaluations,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        diag: Vec<f64>,
        center: Vec<f64>,
    }

    impl Differentiable for Quadratic {
        fn dim(&self) -> usize {
            self.diag.len()
        }

        fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
            let mut f = 0.0;
            let mut g = vec![0.0; x.len()];
            for k in 0..x.len() {
                let d = x[k] - self.center[k];
                f += 0.5 * self.diag[k] * d * d;
                g[k] = self.diag[k] * d;
            }
            Some((f, g))
        }
    }

    struct Rosenbrock;

    impl Differentiable for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }

        fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Some((f, g))
        }
    }

    fn settings() -> LbfgsSettings {
        LbfgsSettings {
            max_iter: 2000,
            grad_tol: 1e-13,
            f_tol: 1e-15,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }

    #[test]
    fn quadratic_bowl() {
        let q = Quadratic {
            diag: vec![1.0, 10.0, 100.0, 0.5],
            center: vec![1.0, -2.0, 3.0, 0.25],
        };
        let r = lbfgs(&q, &[0.0; 4], &settings()).unwrap();
        assert_eq!(r.termination, Termination::GradientTolerance);
        for (a, b) in r.x.iter().zip(&q.center) {
            assert!((a - b).abs() < 1e-10, "{:?}", r.x);
        }
    }

    #[test]
    fn rosenbrock_valley() {
        let r = lbfgs(&Rosenbrock, &[-1.2, 1.0], &settings()).unwrap();
        assert!(r.termination.converged());
        assert!(
            (r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6,
            "{:?}",
            r.x
        );
    }

    #[test]
    fn kinked_objective_terminates() {
        struct Abs;
        impl Differentiable for Abs {
            fn dim(&self) -> usize {
                2
            }
            fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
                let f = x[0].abs() + (x[1] - 1.0).powi(2);
                let g = vec![
                    if x[0] > 0.0 {
                        1.0
                    } else if x[0] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    },
                    2.0 * (x[1] - 1.0),
                ];
                Some((f, g))
            }
        }
        let r = lbfgs(&Abs, &[0.7, -3.0], &settings()).unwrap();
        assert!(r.value < 1e-6, "{r:?}");
    }

    #[test]
    fn cubic_interpolation_of_parabola() {
        // f = (x - 2)^2 sampled at 0 and 3
        let a = cubic_min(0.0, 4.0, -4.0, 3.0, 1.0, 2.0);
        assert!((a - 2.0).abs() < 1e-12);
    }
}
