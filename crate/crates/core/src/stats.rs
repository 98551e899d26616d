//! Small descriptive-statistics helpers. Variances and covariances use the
//! case count `n` as denominator.

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn covariance(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(
        x.len(),
        y.len(),
        "covariance of vectors with different lengths"
    );
    if x.is_empty() {
        return 0.0;
    }
    let (mx, my) = (mean(x), mean(y));
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / x.len() as f64
}

pub fn variance(x: &[f64]) -> f64 {
    covariance(x, x)
}

/// Sample standard deviation with the `n - 1` denominator, as used for
/// summarising replicate estimates.
pub fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_moments() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&x), 2.5);
        assert_eq!(variance(&x), 1.25);
        assert_eq!(covariance(&x, &[2.0, 4.0, 6.0, 8.0]), 2.5);
        assert!((sample_sd(&x) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(sample_sd(&[3.0]), 0.0);
    }
}
