//! Seeded synthetic data for the six simulation studies.
//!
//! Every random vector is drawn from its own ChaCha8 stream (`seed`, stream
//! id fixed per vector), with normal variates from `rand_distr`'s
//! `StandardNormal`. Output is therefore bit-identical for identical inputs,
//! and changing one noise level does not disturb the other vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DataError, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    Regression,
    Democracy,
    Ganzach,
    Muthen,
    Exponential,
    Implicative,
}

impl Study {
    pub const ALL: [Study; 6] = [
        Study::Regression,
        Study::Democracy,
        Study::Ganzach,
        Study::Muthen,
        Study::Exponential,
        Study::Implicative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::Regression => "regression",
            Study::Democracy => "democracy",
            Study::Ganzach => "ganzach",
            Study::Muthen => "muthen",
            Study::Exponential => "exponential",
            Study::Implicative => "implicative",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Study::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                format!("unknown study `{s}` (expected regression, democracy, ganzach, muthen, exponential or implicative)")
            })
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("study {study} has no parameter `{name}`")]
    UnknownParam { study: Study, name: String },
    #[error("parameter `{name}` must be finite and non-negative")]
    BadValue { name: String },
    #[error("latent covariance matrix is not positive definite")]
    Covariance,
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Generator parameters: structural coefficients keep their model names,
/// noise standard deviations start with `sd_`.
pub type Params = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub study: Study,
    pub n: usize,
    pub seed: u64,
    /// Replaces individual default parameters.
    pub overrides: Params,
}

impl SimSpec {
    pub fn new(study: Study, n: usize, seed: u64) -> Self {
        SimSpec {
            study,
            n,
            seed,
            overrides: Params::new(),
        }
    }
}

/// Generating values for scoring estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub study: Study,
    pub params: Params,
    pub latent_names: Vec<String>,
    /// `n x Q`.
    pub latents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: Dataset,
    pub truth: Truth,
}

fn table(entries: &[(&str, f64)]) -> Params {
    entries.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Default generator parameters of a study.
pub fn default_params(study: Study) -> Params {
    match study {
        Study::Regression => table(&[
            ("a", 0.5),
            ("sd_d1", 0.5),
            ("sd_d2", 0.2),
            ("sd_e1", 0.2),
            ("sd_e2", 0.1),
        ]),
        Study::Democracy => table(&[
            ("b1", 1.2),
            ("b2", 0.5),
            ("b3", 0.8),
            ("c2", 0.7),
            ("c3", 0.9),
            ("d2", 0.3),
            ("d3", 0.9),
            ("d4", 1.7),
            ("d6", 0.6),
            ("d7", 0.4),
            ("d8", 1.3),
            ("sd_x1", 0.1),
            ("sd_x2", 0.2),
            ("sd_x3", 0.3),
            ("sd_y1", 0.2),
            ("sd_y2", 0.1),
            ("sd_y3", 0.2),
            ("sd_y4", 0.3),
            ("sd_y5", 0.2),
            ("sd_y6", 0.1),
            ("sd_y7", 0.2),
            ("sd_y8", 0.3),
            ("sd_1", 0.5),
            ("sd_2", 0.2),
        ]),
        Study::Ganzach => table(&[
            ("gamma1", 0.3),
            ("gamma2", 0.2),
            ("om11", 0.5),
            ("om12", 0.3),
            ("om22", 0.2),
            ("rho", 0.3),
            ("c2", 0.7),
            ("c3", 1.2),
            ("c5", 0.5),
            ("c6", 0.9),
            ("d2", 0.8),
            ("d3", 1.3),
            ("sd_eta", 0.3),
            ("sd_x1", 0.1),
            ("sd_x2", 0.1),
            ("sd_x3", 0.3),
            ("sd_x4", 0.1),
            ("sd_x5", 0.1),
            ("sd_x6", 0.3),
            ("sd_y1", 0.1),
            ("sd_y2", 0.1),
            ("sd_y3", 0.3),
        ]),
        Study::Muthen => {
            let mut p = table(&[
                ("B1", 0.1),
                ("B2", 0.3),
                ("B3", 0.2),
                ("B4", 0.7),
                ("var1", 1.2),
                ("cov12", 0.4),
                ("var2", 0.8),
                ("sd_eta3", 0.2),
                ("sd_eta4", 0.1),
            ]);
            let c = [1.0, 0.5, 0.7, 1.0, 0.7, 0.4, 1.0, 1.2, 0.4, 1.0, 0.8, 0.9];
            for (i, ci) in c.iter().enumerate() {
                p.insert(format!("c{}", i + 1), *ci);
                p.insert(format!("sd_y{}", i + 1), 0.1 * (1.0 + ((i + 1) % 3) as f64));
            }
            p
        }
        Study::Exponential => table(&[
            ("d1", 3.0),
            ("k1", 0.5),
            ("c2", 0.7),
            ("d2", 0.9),
            ("sd_X0", 0.1),
            ("sd_x1", 0.1),
            ("sd_x2", 0.2),
            ("sd_y1", 0.2),
            ("sd_y2", 0.1),
        ]),
        Study::Implicative => table(&[
            ("c2", 0.7),
            ("d1", 0.4),
            ("d2", 0.8),
            ("sd_x1", 0.3),
            ("sd_x2", 0.15),
            ("sd_y", 0.2),
        ]),
    }
}

/// Defaults with every noise standard deviation set to zero.
pub fn noise_free_params(study: Study) -> Params {
    let mut p = default_params(study);
    for (k, v) in p.iter_mut() {
        if k.starts_with("sd_") && k != "sd_X0" {
            *v = 0.0;
        }
    }
    p
}

fn resolve(study: Study, overrides: &Params) -> Result<Params, SimError> {
    let mut p = default_params(study);
    for (k, v) in overrides {
        if !p.contains_key(k) {
            return Err(SimError::UnknownParam {
                study,
                name: k.clone(),
            });
        }
        if !v.is_finite() || (k.starts_with("sd_") && *v < 0.0) {
            return Err(SimError::BadValue { name: k.clone() });
        }
        p.insert(k.clone(), *v);
    }
    Ok(p)
}

/// Normal vectors drawn from per-vector streams of one seed.
struct Streams {
    seed: u64,
    n: usize,
}

impl Streams {
    fn normal(&self, stream: u64, sd: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        (0..self.n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            })
            .collect()
    }

    /// Two correlated standard normal vectors with covariance
    /// `[[v11, v12], [v12, v22]]`, via the Cholesky factor.
    fn pair(
        &self,
        stream: u64,
        v11: f64,
        v12: f64,
        v22: f64,
    ) -> Result<(Vec<f64>, Vec<f64>), SimError> {
        let l11 = v11.sqrt();
        if l11.is_nan() || l11 <= 0.0 {
            return Err(SimError::Covariance);
        }
        let l21 = v12 / l11;
        let rest = v22 - l21 * l21;
        if rest.is_nan() || rest <= 0.0 {
            return Err(SimError::Covariance);
        }
        let l22 = rest.sqrt();
        let z1 = self.normal(stream, 1.0);
        let z2 = self.normal(stream + 1, 1.0);
        let a = z1.iter().map(|z| l11 * z).collect();
        let b = z1.iter().zip(&z2).map(|(u, v)| l21 * u + l22 * v).collect();
        Ok((a, b))
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn scaled(c: f64, a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| c * x).collect()
}

fn finish(
    study: Study,
    params: Params,
    columns: Vec<(String, Vec<f64>)>,
    latents: Vec<(&str, Vec<f64>)>,
) -> Result<Simulated, SimError> {
    let data = Dataset::from_columns(columns)?;
    let n = data.n_rows();
    let truth = Truth {
        study,
        params,
        latent_names: latents.iter().map(|(k, _)| k.to_string()).collect(),
        latents: (0..n)
            .map(|i| latents.iter().map(|(_, v)| v[i]).collect())
            .collect(),
    };
    Ok(Simulated { data, truth })
}

fn indicator(
    p: &Params,
    streams: &Streams,
    stream: u64,
    name: &str,
    loading: f64,
    latent: &[f64],
) -> (String, Vec<f64>) {
    let noise = streams.normal(stream, p[&format!("sd_{name}")]);
    (name.to_string(), add(&scaled(loading, latent), &noise))
}

/// `x_i = X + delta_i`, `y_i = a X + eps_i`, `X ~ N(0, 1)`.
pub fn gen_regression(n: usize, seed: u64, overrides: &Params) -> Result<Simulated, SimError> {
    let p = resolve(Study::Regression, overrides)?;
    let s = Streams { seed, n };
    let x = s.normal(0, 1.0);
    let a = p["a"];
    let cols = vec![
        ("x1".to_string(), add(&x, &s.normal(1, p["sd_d1"]))),
        ("x2".to_string(), add(&x, &s.normal(2, p["sd_d2"]))),
        (
            "y1".to_string(),
            add(&scaled(a, &x), &s.normal(3, p["sd_e1"])),
        ),
        (
            "y2".to_string(),
            add(&scaled(a, &x), &s.normal(4, p["sd_e2"])),
        ),
    ];
    finish(Study::Regression, p, cols, vec![("X", x)])
}

/// Industrialization and democracy: `ind60 ~ N(0, 1)`, `dem60 = b1 ind60 +
/// N(0, sd_1)`, `dem65 = b2 ind60 + b3 dem60 + N(0, sd_2)`, with three
/// indicators of `ind60` and four each of `dem60` and `dem65`.
pub fn gen_democracy(n: usize, seed: u64, overrides: &Params) -> Result<Simulated, SimError> {
    let p = resolve(Study::Democracy, overrides)?;
    let s = Streams { seed, n };
    let ind60 = s.normal(0, 1.0);
    let dem60 = add(&scaled(p["b1"], &ind60), &s.normal(1, p["sd_1"]));
    let dem65 = add(
        &add(&scaled(p["b2"], &ind60), &scaled(p["b3"], &dem60)),
        &s.normal(2, p["sd_2"]),
    );
    let mut cols = vec![
        indicator(&p, &s, 10, "x1", 1.0, &ind60),
        indicator(&p, &s, 11, "x2", p["c2"], &ind60),
        indicator(&p, &s, 12, "x3", p["c3"], &ind60),
        indicator(&p, &s, 13, "y1", 1.0, &dem60),
    ];
    for (k, name) in ["y2", "y3", "y4"].iter().enumerate() {
        cols.push(indicator(
            &p,
            &s,
            14 + k as u64,
            name,
            p[&format!("d{}", k + 2)],
            &dem60,
        ));
    }
    cols.push(indicator(&p, &s, 17, "y5", 1.0, &dem65));
    for (k, name) in ["y6", "y7", "y8"].iter().enumerate() {
        cols.push(indicator(
            &p,
            &s,
            18 + k as u64,
            name,
            p[&format!("d{}", k + 6)],
            &dem65,
        ));
    }
    finish(
        Study::Democracy,
        p,
        cols,
        vec![("ind60", ind60), ("dem60", dem60), ("dem65", dem65)],
    )
}

/// Quadratic interaction: correlated `xi1, xi2` with unit variances,
/// `eta = gamma1 xi1 + gamma2 xi2 + om11 xi1^2 + om12 xi1 xi2 + om22 xi2^2 +
/// N(0, sd_eta)`, three indicators per latent.
pub fn gen_ganzach(n: usize, seed: u64, overrides: &Params) -> Result<Simulated, SimError> {
    let p = resolve(Study::Ganzach, overrides)?;
    let s = Streams { seed, n };
    let (xi1, xi2) = s.pair(0, 1.0, p["rho"], 1.0)?;
    let noise = s.normal(2, p["sd_eta"]);
    let eta: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (xi1[i], xi2[i]);
            p["gamma1"] * a
                + p["gamma2"] * b
                + p["om11"] * a * a
                + p["om12"] * a * b
                + p["om22"] * b * b
                + noise[i]
        })
        .collect();
    let cols = vec![
        indicator(&p, &s, 10, "x1", 1.0, &xi1),
        indicator(&p, &s, 11, "x2", p["c2"], &xi1),
        indicator(&p, &s, 12, "x3", p["c3"], &xi1),
        indicator(&p, &s, 13, "x4", 1.0, &xi2),
        indicator(&p, &s, 14, "x5", p["c5"], &xi2),
        indicator(&p, &s, 15, "x6", p["c6"], &xi2),
        indicator(&p, &s, 16, "y1", 1.0, &eta),
        indicator(&p, &s, 17, "y2", p["d2"], &eta),
        indicator(&p, &s, 18, "y3", p["d3"], &eta),
    ];
    finish(
        Study::Ganzach,
        p,
        cols,
        vec![("eta", eta), ("xi1", xi1), ("xi2", xi2)],
    )
}

/// Latent interaction with a mediator: correlated `eta1, eta2`, `eta3 = B1
/// eta1 + B2 eta2 + B3 eta1 eta2 + N(0, sd_eta3)`, `eta4 = B4 eta3 + N(0,
/// sd_eta4)`, indicators `y_i = c_i eta_ceil(i/3) + N(0, sd_yi)`.
pub fn gen_muthen(n: usize, seed: u64, overrides: &Params) -> Result<Simulated, SimError> {
    let p = resolve(Study::Muthen, overrides)?;
    let s = Streams { seed, n };
    let (eta1, eta2) = s.pair(0, p["var1"], p["cov12"], p["var2"])?;
    let n3 = s.normal(2, p["sd_eta3"]);
    let eta3: Vec<f64> = (0..n)
        .map(|i| p["B1"] * eta1[i] + p["B2"] * eta2[i] + p["B3"] * eta1[i] * eta2[i] + n3[i])
        .collect();
    let eta4 = add(&scaled(p["B4"], &eta3), &s.normal(3, p["sd_eta4"]));
    let etas = [&eta1, &eta2, &eta3, &eta4];
    let cols = (1..=12)
        .map(|i| {
            indicator(
                &p,
                &s,
                10 + i as u64,
                &format!("y{i}"),
                p[&format!("c{i}")],
                etas[(i - 1) / 3],
            )
        })
        .collect();
    finish(
        Study::Muthen,
        p,
        cols,
        vec![
            ("eta1", eta1),
            ("eta2", eta2),
            ("eta3", eta3),
            ("eta4", eta4),
        ],
    )
}

/// `X0 ~ N(0, sd_X0)`, `Y0 = d1 exp(k1 X0)`; `x1, x2` measure `X0` and
/// `y1, y2` measure `Y0`.
pub fn gen_exponential(n: usize, seed: u64, overrides: &Params) -> Result<Simulated, SimError> {
    let p = resolve(Study::Exponential, overrides)?;
    let s = Streams { seed, n };
    let x0 = s.normal(0, p["sd_X0"]);
    let y0: Vec<f64> = x0.iter().map(|x| p["d1"] * (p["k1"] * x).exp()).collect();
    let cols = vec![
        indicator(&p, &s, 10, "x1", 1.0, &x0),
        indicator(&p, &s, 11, "x2", p["c2"], &x0),
        indicator(&p, &s, 12, "y1", 1.0, &y0),
        indicator(&p, &s, 13, "y2", p["d2"], &y0),
    ];
    finish(Study::Exponential, p, cols, vec![("X0", x0)])
}

/// `X0 ~ N(0, 1)`, `y = d1 X0 + d2 theta(X0) + N(0, sd_y)`.
pub fn gen_implicative(n: usize, seed: u64, overrides: &Params) -> Result<Simulated, SimError> {
    let p = resolve(Study::Implicative, overrides)?;
    let s = Streams { seed, n };
    let x0 = s.normal(0, 1.0);
    let y: Vec<f64> = x0
        .iter()
        .map(|x| p["d1"] * x + p["d2"] * crate::expr::theta(*x))
        .collect();
    let cols = vec![
        indicator(&p, &s, 10, "x1", 1.0, &x0),
        indicator(&p, &s, 11, "x2", p["c2"], &x0),
        indicator(&p, &s, 12, "y", 1.0, &y),
    ];
    finish(Study::Implicative, p, cols, vec![("X0", x0)])
}

/// Generates data for `spec`.
pub fn generate(spec: &SimSpec) -> Result<Simulated, SimError> {
    if spec.n == 0 {
        return Err(SimError::EmptySample);
    }
    let f = match spec.study {
        Study::Regression => gen_regression,
        Study::Democracy => gen_democracy,
        Study::Ganzach => gen_ganzach,
        Study::Muthen => gen_muthen,
        Study::Exponential => gen_exponential,
        Study::Implicative => gen_implicative,
    };
    f(spec.n, spec.seed, &spec.overrides)
}
