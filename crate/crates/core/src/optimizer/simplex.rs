//! Derivative-free maximization over the probability simplex.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Smallest weight any coordinate may take.
pub const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexResult {
    pub weights: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    /// The evaluation budget ran out before the search converged.
    pub budget_exhausted: bool,
}

/// Euclidean projection of `v` onto `{w : sum w = 1, w_l >= floor}`.
pub fn project_to_simplex(v: &[f64], floor: f64) -> Vec<f64> {
    let m = v.len();
    if m == 0 {
        return Vec::new();
    }
    let floor = floor.min(1.0 / m as f64);
    let mass = 1.0 - floor * m as f64;
    let shifted: Vec<f64> = v
        .iter()
        .map(|x| if x.is_finite() { x - floor } else { 0.0 })
        .collect();
    let mut sorted = shifted.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - mass) / (k + 1) as f64;
        if s - t > 0.0 {
            tau = t;
        }
    }
    shifted.iter().map(|x| (x - tau).max(0.0) + floor).collect()
}

struct Search<F: FnMut(&[f64]) -> f64> {
    f: F,
    m: usize,
    budget: usize,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> f64> Search<F> {
    fn weights(&self, y: &[f64]) -> Vec<f64> {
        let mut full = y.to_vec();
        full.push(1.0 - y.iter().sum::<f64>());
        project_to_simplex(&full, WEIGHT_FLOOR)
    }

    /// Projects `y`, evaluates the negated objective and returns the
    /// feasible reduced point with its cost.
    fn eval(&mut self, y: &[f64]) -> (Vec<f64>, f64) {
        let w = self.weights(y);
        self.evaluations += 1;
        let v = (self.f)(&w);
        let cost = if v.is_nan() { f64::INFINITY } else { -v };
        (w[..self.m - 1].to_vec(), cost)
    }

    fn exhausted(&self) -> bool {
        self.evaluations >= self.budget
    }
}

/// Maximizes `f` over the weight simplex with a Nelder-Mead search in the
/// first `m - 1` coordinates; every trial point is projected onto the
/// floored simplex before evaluation. `start` defaults to equal weights.
pub fn maximize_on_simplex<F: FnMut(&[f64]) -> f64>(
    f: F,
    m: usize,
    budget: usize,
    start: Option<&[f64]>,
    seed: u64,
) -> SimplexResult {
    if m <= 1 {
        return SimplexResult {
            weights: vec![1.0; m],
            value: f64::NAN,
            evaluations: 0,
            budget_exhausted: false,
        };
    }
    let w0 = match start {
        Some(s) if s.len() == m => project_to_simplex(s, WEIGHT_FLOOR),
        _ => vec![1.0 / m as f64; m],
    };
    let mut search = Search {
        f,
        m,
        budget: budget.max(1),
        evaluations: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let d = m - 1;
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(m);
    simplex.push(search.eval(&w0[..d]));
    for k in 0..d {
        if search.exhausted() {
            break;
        }
        let mut y = w0[..d].to_vec();
        let jitter: f64 = rng.random_range(0.9..1.1);
        let step = 0.5 * w0[k].max(0.02) * jitter;
        // move toward the corner when there is room, away from it otherwise
        y[k] += if w0[k] + step < 1.0 { step } else { -step };
        simplex.push(search.eval(&y));
    }

    let mut converged = false;
    while simplex.len() == m && !search.exhausted() {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[d].1;
        let spread = (worst - best).abs();
        let diameter = simplex
            .iter()
            .skip(1)
            .map(|(y, _)| {
                y.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread <= 1e-12 * (1.0 + best.abs()) && diameter < 1e-9 {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|(y, _)| y[j]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64, y: &[f64]| -> Vec<f64> {
            centroid
                .iter()
                .zip(y)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let worst_y = simplex[d].0.clone();
        let reflected = search.eval(&along(-1.0, &worst_y));
        if reflected.1 < best {
            if search.exhausted() {
                simplex[d] = reflected;
                break;
            }
            let expanded = search.eval(&along(-2.0, &worst_y));
            simplex[d] = if expanded.1 < reflected.1 {
                expanded
            } else {
                reflected
            };
            continue;
        }
        if reflected.1 < simplex[d - 1].1 {
            simplex[d] = reflected;
            continue;
        }
        if search.exhausted() {
            break;
        }
        let contracted = if reflected.1 < worst {
            search.eval(&along(-0.5, &worst_y))
        } else {
            search.eval(&along(0.5, &worst_y))
        };
        if contracted.1 < worst.min(reflected.1) {
            simplex[d] = contracted;
            continue;
        }
        // shrink toward the best vertex
        let best_y = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            if search.exhausted() {
                break;
            }
            let y: Vec<f64> = best_y
                .iter()
                .zip(&vertex.0)
                .map(|(b, v)| b + 0.5 * (v - b))
                .collect();
            *vertex = search.eval(&y);
        }
    }

    let (y, cost) = simplex
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .expect("simplex has a vertex");
    SimplexResult {
        weights: search.weights(&y),
        value: -cost,
        evaluations: search.evaluations,
        budget_exhausted: !converged,
    }
}
