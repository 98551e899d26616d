//! The estimator against independent reference computations.

use clssem::optimizer::Differentiable;
use clssem::oracle::{brute_force_min, orthogonal_regression, reflective_scores};
use clssem::{estimate, parse_model, Dataset, EstimateConfig, Objective};

const REGRESSION: &str = "latent: Z\nmanifest: x, y\nparam: a\neq x: x = Z\neq y: y = a*Z\n";

fn tiny_regression() -> Dataset {
    Dataset::from_columns(vec![
        ("x".into(), vec![0.9, -1.2, 0.4]),
        ("y".into(), vec![0.6, -0.5, 0.1]),
    ])
    .unwrap()
}

fn exact() -> EstimateConfig {
    EstimateConfig {
        check_uniqueness: false,
        ..Default::default()
    }
}

#[test]
fn brute_force_agrees_with_estimator_on_three_cases() {
    let model = parse_model(REGRESSION).unwrap();
    let data = tiny_regression();
    let fit = estimate(&model, &data, &exact()).unwrap();
    let bound = data.bind(&model).unwrap();
    let obj = Objective::new(&model, &bound, vec![1.0, 1.0]).unwrap();
    let bounds = vec![(-3.0, 3.0); obj.dim()];
    let brute = brute_force_min(&obj, &bounds, 9).unwrap();
    assert!(
        (brute.value - fit.f_min).abs() < 1e-4,
        "{} vs {}",
        brute.value,
        fit.f_min
    );
    assert!((brute.x[0] - fit.param("a").unwrap()).abs() < 1e-4);
    for (b, z) in brute.x[1..].iter().zip(&fit.latent_scores) {
        assert!((b - z[0]).abs() < 1e-4);
    }
}

#[test]
fn closed_form_point_is_stationary_and_optimal() {
    let model = parse_model(REGRESSION).unwrap();
    let data = tiny_regression();
    let bound = data.bind(&model).unwrap();
    let obj = Objective::new(&model, &bound, vec![1.0, 1.0]).unwrap();
    let oracle = orthogonal_regression(&data.column(0), &data.column(1)).unwrap();
    let mut u = vec![oracle.a];
    u.extend(&oracle.scores);
    let (f, g) = obj.value_and_gradient(&u).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
    let fit = estimate(&model, &data, &exact()).unwrap();
    assert!((f - fit.f_min).abs() < 1e-12);
}

#[test]
fn reflective_scores_match_unit_loadings_mean() {
    let rows = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.0]];
    let z = reflective_scores(&rows, &[1.0, 1.0, 1.0]).unwrap();
    assert!((z[0] - 2.0).abs() < 1e-15 && (z[1] - 1.0).abs() < 1e-15);
}

#[test]
fn orthogonal_regression_is_symmetric_in_swapped_axes() {
    let x = [0.3, -1.2, 0.8, 2.0, -0.4];
    let y = [0.1, -0.7, 0.5, 0.9, 0.2];
    let forward = orthogonal_regression(&x, &y).unwrap();
    let backward = orthogonal_regression(&y, &x).unwrap();
    assert!((forward.a * backward.a - 1.0).abs() < 1e-12);
}
