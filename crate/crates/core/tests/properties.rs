//! Invariants of the objective, the estimator and the generators.

use clssem::fit::{degrees_of_freedom, permutation_null_fit, PermutationOptions};
use clssem::{
    chi_square_fit, estimate, generate, parse_model, residual_mean_r, Dataset, DfMode,
    EstimateConfig, Objective, SimSpec, Study,
};
use proptest::prelude::*;

const REGRESSION: &str = "latent: Z\nmanifest: x, y\nparam: a\neq x: x = Z\neq y: y = a*Z\n";

const CONSTRAINED: &str = "latent: Z\nmanifest: x1, x2, x3\nparam: b, c\n\
     eq x1: x1 = Z\neq x2: x2 = b*Z\neq x3: x3 = c*Z^2\n\
     constraint center(Z)\nconstraint zerocov(x1, x2)\n";

fn dataset(names: &[&str], values: &[f64], n: usize) -> Dataset {
    let columns = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            (
                name.to_string(),
                (0..n).map(|i| values[j * n + i]).collect(),
            )
        })
        .collect();
    Dataset::from_columns(columns).unwrap()
}

fn config() -> EstimateConfig {
    EstimateConfig {
        check_uniqueness: false,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scaling_weights_scales_the_objective(
        values in prop::collection::vec(-2.0..2.0f64, 18),
        u in prop::collection::vec(-1.5..1.5f64, 8),
        w in prop::collection::vec(0.1..3.0f64, 3),
        c in 0.01..100.0f64,
    ) {
        let model = parse_model(CONSTRAINED).unwrap();
        let data = dataset(&["x1", "x2", "x3"], &values, 6);
        let bound = data.bind(&model).unwrap();
        let base = Objective::with_penalty(&model, &bound, w.clone(), Some(1.0)).unwrap();
        let scaled = Objective::with_penalty(&model, &bound, w.iter().map(|v| c * v).collect(), Some(c)).unwrap();
        let f = base.value(&u).unwrap();
        let g = scaled.value(&u).unwrap();
        prop_assert!((g - c * f).abs() <= 1e-9 * (c * f).abs().max(1.0), "{g} vs {}", c * f);
    }

    #[test]
    fn case_order_does_not_change_the_fit(
        values in prop::collection::vec(-2.0..2.0f64, 16),
        shift in 1usize..8,
    ) {
        let model = parse_model(REGRESSION).unwrap();
        let data = dataset(&["x", "y"], &values, 8);
        let order: Vec<usize> = (0..8).map(|i| (i + shift) % 8).collect();
        let permuted = data.permute_rows(&order);
        let a = estimate(&model, &data, &config()).unwrap();
        let b = estimate(&model, &permuted, &config()).unwrap();
        prop_assert!((a.f_min - b.f_min).abs() <= 1e-8 * a.f_min.max(1e-8));
        let (pa, pb) = (a.param("a").unwrap(), b.param("a").unwrap());
        prop_assert!((pa - pb).abs() <= 1e-6 * pa.abs().max(1.0));
        for (k, &i) in order.iter().enumerate() {
            prop_assert!((b.latent_scores[k][0] - a.latent_scores[i][0]).abs() <= 1e-6);
        }
    }

    #[test]
    fn residual_mean_is_monotone(f in 0.0..1e4f64, extra in 1e-6..1e3f64, n in 1usize..500, m in 1usize..20) {
        prop_assert!(residual_mean_r(f, n, m) < residual_mean_r(f + extra, n, m));
        prop_assert!(residual_mean_r(f, n, m) >= 0.0);
    }

    #[test]
    fn generators_are_deterministic(seed in any::<u64>(), n in 2usize..40, which in 0usize..6) {
        let study = Study::ALL[which];
        let a = generate(&SimSpec::new(study, n, seed)).unwrap();
        let b = generate(&SimSpec::new(study, n, seed)).unwrap();
        prop_assert_eq!(a.data, b.data);
        prop_assert_eq!(a.truth.latents, b.truth.latents);
    }
}

#[test]
fn identity_permutation_reproduces_the_minimum() {
    let model = parse_model(REGRESSION).unwrap();
    let data = generate(&SimSpec::new(Study::Regression, 30, 4))
        .unwrap()
        .data;
    let data = Dataset::from_columns(vec![
        ("x".into(), data.column_by_name("x1").unwrap()),
        ("y".into(), data.column_by_name("y1").unwrap()),
    ])
    .unwrap();
    let fit = estimate(&model, &data, &config()).unwrap();
    let opts = PermutationOptions {
        reps: 4,
        seed: 1,
        identity: true,
    };
    let perm = permutation_null_fit(&model, &data, &config(), fit.f_min, opts).unwrap();
    assert_eq!(perm.samples.len(), 4);
    for f in &perm.samples {
        assert!(
            (f - fit.f_min).abs() <= 1e-10 * fit.f_min,
            "{f} vs {}",
            fit.f_min
        );
    }
}

#[test]
fn degrees_of_freedom_examples() {
    assert_eq!(degrees_of_freedom(DfMode::Naive, 100, 4, 1, 1), 299);
    assert_eq!(degrees_of_freedom(DfMode::Equations, 100, 4, 1, 1), 400);
    assert_eq!(degrees_of_freedom(DfMode::Naive, 2, 2, 2, 1), -1);
}

#[test]
fn chi_square_statistic_counts_standardized_residuals() {
    let model = parse_model(REGRESSION).unwrap();
    let data = generate(&SimSpec::new(Study::Regression, 50, 9))
        .unwrap()
        .data;
    let data = Dataset::from_columns(vec![
        ("x".into(), data.column_by_name("x1").unwrap()),
        ("y".into(), data.column_by_name("y1").unwrap()),
    ])
    .unwrap();
    let fit = estimate(&model, &data, &config()).unwrap();
    let chi = chi_square_fit(&fit, DfMode::Equations).unwrap();
    let mut expected = 0.0;
    for l in 0..2 {
        let ss: f64 = fit.residuals.iter().map(|row| row[l] * row[l]).sum();
        // the variance is centered, so each equation contributes at least n
        assert!(ss / fit.residual_variances[l] >= 50.0 - 1e-9);
        expected += ss / fit.residual_variances[l];
    }
    assert!((chi.statistic - expected).abs() < 1e-9 * expected);
    assert_eq!(chi.df, 100);
    assert!(chi.p_value > 0.0 && chi.p_value < 1.0);
    assert!(chi_square_fit(&fit, DfMode::Naive).is_ok());
}
