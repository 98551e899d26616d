//! Independent reference computations used to check the estimator: the
//! closed-form orthogonal regression, the reflective composite scores and a
//! grid-plus-pattern-search minimizer for tiny problems.

use thiserror::Error;

use crate::optimizer::Differentiable;

/// Largest unknown vector `brute_force_min` accepts.
pub const BRUTE_FORCE_MAX_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("sum of x*y is zero, the slope is undetermined")]
    DegenerateOrientation,
    #[error("x and y have different lengths ({0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("the loading vector is zero")]
    ZeroLoadings,
    #[error("row {row} has {found} entries, expected {expected}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("brute force supports at most {max} unknowns, got {found}")]
    DimensionTooLarge { max: usize, found: usize },
    #[error("bounds must be finite with lower < upper and resolution at least 2")]
    BadGrid,
    #[error("objective is not finite anywhere on the grid")]
    NoFiniteValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalRegression {
    pub a: f64,
    pub scores: Vec<f64>,
}

/// Minimizer of `sum (x_i - Z_i)^2 + (y_i - a Z_i)^2` over `a` and `Z`:
/// `a = (B - A + sqrt((A - B)^2 + 4 C^2)) / (2 C)` with `A = sum x^2`,
/// `B = sum y^2`, `C = sum x y`, and `Z_i = (x_i + a y_i) / (1 + a^2)`.
pub fn orthogonal_regression(x: &[f64], y: &[f64]) -> Result<OrthogonalRegression, OracleError> {
    if x.len() != y.len() {
        return Err(OracleError::LengthMismatch(x.len(), y.len()));
    }
    let a_sum: f64 = x.iter().map(|v| v * v).sum();
    let b_sum: f64 = y.iter().map(|v| v * v).sum();
    let c_sum: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
    if c_sum == 0.0 {
        return Err(OracleError::DegenerateOrientation);
    }
    let d = b_sum - a_sum;
    let root = (d * d + 4.0 * c_sum * c_sum).sqrt();
    // the textbook form cancels badly when d < 0 and |C| is small
    let a = if d >= 0.0 {
        (d + root) / (2.0 * c_sum)
    } else {
        2.0 * c_sum / (root - d)
    };
    let scores = x
        .iter()
        .zip(y)
        .map(|(u, v)| (u + a * v) / (1.0 + a * a))
        .collect();
    Ok(OrthogonalRegression { a, scores })
}

/// Scores of the reflective model `x_j = lambda_j Z` that minimize the
/// unweighted squared residuals for fixed loadings:
/// `Z_i = sum_j x_{j,i} lambda_j / sum_j lambda_j^2`. `rows` holds one case
/// per row.
pub fn reflective_scores(rows: &[Vec<f64>], loadings: &[f64]) -> Result<Vec<f64>, OracleError> {
    let denom: f64 = loadings.iter().map(|l| l * l).sum();
    if denom == 0.0 {
        return Err(OracleError::ZeroLoadings);
    }
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != loadings.len() {
                return Err(OracleError::RowLength {
                    row: i,
                    expected: loadings.len(),
                    found: row.len(),
                });
            }
            Ok(row.iter().zip(loadings).map(|(x, l)| x * l).sum::<f64>() / denom)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

fn value_of(problem: &impl Differentiable, x: &[f64]) -> f64 {
    match problem.value(x) {
        Some(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    }
}

/// Evaluates `problem` on a regular grid with `resolution` points per axis
/// inside `bounds`, then refines the best grid point by compass search until
/// the step falls below `1e-10` times the grid spacing. Uses values only.
pub fn brute_force_min(
    problem: &impl Differentiable,
    bounds: &[(f64, f64)],
    resolution: usize,
) -> Result<BruteForceResult, OracleError> {
    let dim = bounds.len();
    if dim > BRUTE_FORCE_MAX_DIM || problem.dim() != dim {
        return Err(OracleError::DimensionTooLarge {
            max: BRUTE_FORCE_MAX_DIM,
            found: problem.dim().max(dim),
        });
    }
    if resolution < 2
        || bounds
            .iter()
            .any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi))
    {
        return Err(OracleError::BadGrid);
    }
    let axis = |d: usize, k: usize| {
        let (lo, hi) = bounds[d];
        lo + (hi - lo) * k as f64 / (resolution - 1) as f64
    };
    let total = resolution
        .checked_pow(dim as u32)
        .ok_or(OracleError::BadGrid)?;
    let mut best_x = vec![0.0; dim];
    let mut best = f64::INFINITY;
    let mut x = vec![0.0; dim];
    for index in 0..total {
        let mut rest = index;
        for (d, xd) in x.iter_mut().enumerate() {
            *xd = axis(d, rest % resolution);
            rest /= resolution;
        }
        let v = value_of(problem, &x);
        if v < best {
            best = v;
            best_x.copy_from_slice(&x);
        }
    }
    if !best.is_finite() {
        return Err(OracleError::NoFiniteValue);
    }
    let mut evaluations = total;
    let mut steps: Vec<f64> = bounds
        .iter()
        .map(|(lo, hi)| (hi - lo) / (resolution - 1) as f64)
        .collect();
    let floor: Vec<f64> = steps.iter().map(|s| s * 1e-10).collect();
    while steps.iter().zip(&floor).any(|(s, f)| s > f) {
        let mut improved = false;
        for d in 0..dim {
            for sign in [1.0, -1.0] {
                let mut trial = best_x.clone();
                trial[d] += sign * steps[d];
                let v = value_of(problem, &trial);
                evaluations += 1;
                if v < best {
                    best = v;
                    best_x = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            steps.iter_mut().for_each(|s| *s *= 0.5);
        }
    }
    Ok(BruteForceResult {
        x: best_x,
        value: best,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_data() {
        let r = orthogonal_regression(&[1.0, -1.0], &[2.0, -2.0]).unwrap();
        assert!((r.a - 2.0).abs() < 1e-15);
        assert!((r.scores[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_data() {
        let r = orthogonal_regression(&[1.0, 0.0, -1.0], &[0.0, 1.0, -1.0]).unwrap();
        assert!((r.a - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_slope_and_degenerate() {
        let r = orthogonal_regression(&[1.0, -1.0], &[-3.0, 3.0]).unwrap();
        assert!((r.a + 3.0).abs() < 1e-14);
        assert_eq!(
            orthogonal_regression(&[1.0, 0.0], &[0.0, 1.0]),
            Err(OracleError::DegenerateOrientation)
        );
        assert!(orthogonal_regression(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn stationarity_holds() {
        let x = [0.3, -1.2, 0.8, 2.0, -0.4];
        let y = [0.1, -0.7, 0.5, 0.9, 0.2];
        let r = orthogonal_regression(&x, &y).unwrap();
        let da: f64 = y
            .iter()
            .zip(&r.scores)
            .map(|(yi, z)| (yi - r.a * z) * z)
            .sum();
        assert!(da.abs() < 1e-10);
        for i in 0..x.len() {
            let dz = (x[i] - r.scores[i]) + (y[i] - r.a * r.scores[i]) * r.a;
            assert!(dz.abs() < 1e-12);
        }
    }

    #[test]
    fn reflective_examples() {
        assert_eq!(reflective_scores(&[vec![5.0]], &[1.0]).unwrap(), vec![5.0]);
        assert_eq!(
            reflective_scores(&[vec![2.0, 4.0]], &[1.0, 1.0]).unwrap(),
            vec![3.0]
        );
        assert_eq!(
            reflective_scores(&[vec![1.0, 2.0]], &[1.0, 2.0]).unwrap(),
            vec![1.0]
        );
        assert_eq!(
            reflective_scores(&[vec![1.0]], &[0.0]),
            Err(OracleError::ZeroLoadings)
        );
        assert!(reflective_scores(&[vec![1.0]], &[1.0, 2.0]).is_err());
    }

    struct Quadratic;

    impl Differentiable for Quadratic {
        fn dim(&self) -> usize {
            2
        }

        fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
            let (a, b) = (x[0] - 0.3, x[1] + 1.7);
            Some((a * a + 3.0 * b * b + a * b, vec![2.0 * a + b, 6.0 * b + a]))
        }
    }

    #[test]
    fn quadratic_minimum() {
        let r = brute_force_min(&Quadratic, &[(-3.0, 3.0), (-3.0, 3.0)], 13).unwrap();
        assert!(
            (r.x[0] - 0.3).abs() < 1e-6 && (r.x[1] + 1.7).abs() < 1e-6,
            "{:?}",
            r.x
        );
        assert!(r.value < 1e-12);
    }

    #[test]
    fn grid_validation() {
        assert_eq!(
            brute_force_min(&Quadratic, &[(0.0, 1.0), (1.0, 0.0)], 5),
            Err(OracleError::BadGrid)
        );
        assert_eq!(
            brute_force_min(&Quadratic, &[(0.0, 1.0), (0.0, 1.0)], 1),
            Err(OracleError::BadGrid)
        );
        assert!(matches!(
            brute_force_min(&Quadratic, &[(0.0, 1.0)], 5),
            Err(OracleError::DimensionTooLarge { .. })
        ));
    }
}
