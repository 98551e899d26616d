//! Built-in models for the simulation studies and a replication harness that
//! reports mean estimation error and its standard deviation per parameter and
//! weight strategy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimator::{estimate, EstimateConfig};
use crate::model::{parse_model, Model};
use crate::simgen::{generate, Params, SimSpec, Study};
use crate::weights::WeightStrategy;

const REGRESSION: &str = "\
latent: X
manifest: x1, x2, y1, y2
param: a
eq x1: x1 = X
eq x2: x2 = X
eq y1: y1 = a*X
eq y2: y2 = a*X
";

const DEMOCRACY: &str = "\
latent: ind60, dem60, dem65
manifest: x1, x2, x3, y1, y2, y3, y4, y5, y6, y7, y8
param: b1, b2, b3, c2, c3, d2, d3, d4, d6, d7, d8
param: t1, t2, t3, s1, s2, s3, s4, s5, s6, s7, s8
eq x1: x1 = ind60 + t1
eq x2: x2 = c2*ind60 + t2
eq x3: x3 = c3*ind60 + t3
eq y1: y1 = dem60 + s1
eq y2: y2 = d2*dem60 + s2
eq y3: y3 = d3*dem60 + s3
eq y4: y4 = d4*dem60 + s4
eq y5: y5 = dem65 + s5
eq y6: y6 = d6*dem65 + s6
eq y7: y7 = d7*dem65 + s7
eq y8: y8 = d8*dem65 + s8
eq dem60: dem60 = b1*ind60
eq dem65: dem65 = b2*ind60 + b3*dem60
constraint center(ind60) hard
constraint center(dem60) hard
constraint center(dem65) hard
";

const GANZACH: &str = "\
latent: eta, xi1, xi2
manifest: x1, x2, x3, x4, x5, x6, y1, y2, y3
param: gamma1, gamma2, om11, om12, om22, Oeta
param: c2, c3, c5, c6, d2, d3
param: O1, O2, O3, O4, O5, O6, O7, O8, O9
eq y1: y1 = eta + O7
eq y2: y2 = d2*eta + O8
eq y3: y3 = d3*eta + O9
eq x1: x1 = xi1 + O1
eq x2: x2 = c2*xi1 + O2
eq x3: x3 = c3*xi1 + O3
eq x4: x4 = xi2 + O4
eq x5: x5 = c5*xi2 + O5
eq x6: x6 = c6*xi2 + O6
eq eta: eta = gamma1*xi1 + gamma2*xi2 + om11*xi1^2 + om12*xi1*xi2 + om22*xi2^2 + Oeta
constraint center(eta) hard
constraint center(xi1) hard
constraint center(xi2) hard
";

const MUTHEN: &str = "\
latent: eta1, eta2, eta3, eta4
manifest: y1, y2, y3, y4, y5, y6, y7, y8, y9, y10, y11, y12
param: B1, B2, B3, B4
param: c2, c3, c5, c6, c8, c9, c11, c12
eq y1: y1 = eta1
eq y2: y2 = c2*eta1
eq y3: y3 = c3*eta1
eq y4: y4 = eta2
eq y5: y5 = c5*eta2
eq y6: y6 = c6*eta2
eq y7: y7 = eta3
eq y8: y8 = c8*eta3
eq y9: y9 = c9*eta3
eq y10: y10 = eta4
eq y11: y11 = c11*eta4
eq y12: y12 = c12*eta4
eq eta3: eta3 = B1*eta1 + B2*eta2 + B3*eta1*eta2
eq eta4: eta4 = B4*eta3
";

const EXPONENTIAL: &str = "\
latent: X0
manifest: x1, x2, y1, y2
param: c2, d1, d2, k1
eq x1: x1 = X0
eq x2: x2 = c2*X0
eq y1: y1 = d1*exp(k1*X0)
eq y2: y2 = d2*d1*exp(k1*X0)
";

const IMPLICATIVE: &str = "\
latent: X0
manifest: x1, x2, y
param: c2, d1, d2
eq x1: x1 = X0
eq x2: x2 = c2*X0
eq y: y = d1*X0 + d2*theta(X0)
";

/// Model file text of a study.
pub fn model_text(study: Study) -> &'static str {
    match study {
        Study::Regression => REGRESSION,
        Study::Democracy => DEMOCRACY,
        Study::Ganzach => GANZACH,
        Study::Muthen => MUTHEN,
        Study::Exponential => EXPONENTIAL,
        Study::Implicative => IMPLICATIVE,
    }
}

/// Parsed model of a study.
pub fn model(study: Study) -> Model {
    parse_model(model_text(study)).expect("built-in models parse")
}

/// Parameters whose estimation error the study tables report.
pub fn reported_params(study: Study) -> &'static [&'static str] {
    match study {
        Study::Regression => &["a"],
        Study::Democracy => &[
            "b1", "b2", "b3", "c2", "c3", "d2", "d3", "d4", "d6", "d7", "d8",
        ],
        Study::Ganzach => &["om11", "om12", "om22", "gamma1", "gamma2"],
        Study::Muthen => &["B1", "B2", "B3", "B4"],
        Study::Exponential => &["c2", "d1", "d2", "k1"],
        Study::Implicative => &["c2", "d1", "d2"],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSpec {
    pub study: Study,
    pub n: usize,
    pub reps: usize,
    /// Replicate `r` draws its data with seed `seed + r`.
    pub seed: u64,
    pub strategies: Vec<WeightStrategy>,
    /// Generator overrides.
    pub overrides: Params,
    /// Estimation settings shared by every replicate; `strategy` is replaced
    /// per run.
    pub config: EstimateConfig,
}

impl ReplicationSpec {
    pub fn new(
        study: Study,
        n: usize,
        reps: usize,
        seed: u64,
        strategies: Vec<WeightStrategy>,
    ) -> Self {
        let config = EstimateConfig {
            check_uniqueness: false,
            ..EstimateConfig::default()
        };
        ReplicationSpec {
            study,
            n,
            reps,
            seed,
            strategies,
            overrides: Params::new(),
            config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub param: String,
    pub strategy: WeightStrategy,
    pub true_value: f64,
    /// Estimate minus true value, averaged over successful replicates.
    pub mean_error: f64,
    /// Sample standard deviation of the errors.
    pub sd_error: f64,
    /// Errors of the successful replicates, in replicate order.
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyCounts {
    pub strategy: WeightStrategy,
    pub successes: usize,
    /// Replicates whose estimation returned an error.
    pub failures: usize,
    /// Successful replicates whose optimizer did not report convergence.
    pub not_converged: usize,
    pub messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub study: Study,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub cells: Vec<CellSummary>,
    pub counts: Vec<StrategyCounts>,
    pub wall_time_secs: f64,
}

impl ReplicationReport {
    pub fn cell(&self, param: &str, strategy: WeightStrategy) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.param == param && c.strategy == strategy)
    }

    /// Mean error and SD as `mean(sd)` with three decimals, one row per
    /// parameter and one column per strategy.
    pub fn table(&self) -> String {
        let strategies: Vec<WeightStrategy> = self.counts.iter().map(|c| c.strategy).collect();
        let mut out = String::new();
        let _ = write!(out, "{:>5} {:>8} {:>7}", "n", "param", "true");
        for s in &strategies {
            let _ = write!(out, " {:>16}", s.name());
        }
        out.push('\n');
        let mut params: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !params.contains(&c.param.as_str()) {
                params.push(&c.param);
            }
        }
        for p in params {
            let truth = self
                .cells
                .iter()
                .find(|c| c.param == p)
                .map_or(f64::NAN, |c| c.true_value);
            let _ = write!(out, "{:>5} {:>8} {:>7.3}", self.n, p, truth);
            for s in &strategies {
                let text = match self.cell(p, *s) {
                    Some(c) if !c.errors.is_empty() => {
                        format!("{:.3}({:.3})", c.mean_error, c.sd_error)
                    }
                    _ => "-".to_string(),
                };
                let _ = write!(out, " {text:>16}");
            }
            out.push('\n');
        }
        for c in &self.counts {
            if c.failures > 0 || c.not_converged > 0 {
                let _ = writeln!(
                    out,
                    "{}: {} failed, {} not converged out of {}",
                    c.strategy, c.failures, c.not_converged, self.reps
                );
            }
        }
        out
    }

    /// One line per (parameter, strategy) at full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("study,n,param,strategy,true_value,mean_error,sd_error,successes,failures,not_converged\n");
        for c in &self.cells {
            let counts = self
                .counts
                .iter()
                .find(|k| k.strategy == c.strategy)
                .expect("strategy counted");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.study,
                self.n,
                c.param,
                c.strategy,
                c.true_value,
                c.mean_error,
                c.sd_error,
                counts.successes,
                counts.failures,
                counts.not_converged
            );
        }
        out
    }
}

enum RunOutcome {
    Estimated { values: Vec<f64>, converged: bool },
    Failed(String),
}

/// Generates `reps` data sets and estimates each with every strategy.
/// Runs are executed in parallel and aggregated by replicate index.
pub fn run_replication(spec: &ReplicationSpec) -> Result<ReplicationReport, crate::Error> {
    if spec.reps == 0 {
        return Err(crate::Error::Config(
            "replication needs at least one replicate".into(),
        ));
    }
    if spec.strategies.is_empty() {
        return Err(crate::Error::Config(
            "replication needs at least one strategy".into(),
        ));
    }
    let start = std::time::Instant::now();
    let model = model(spec.study);
    let reported = reported_params(spec.study);
    let first = generate(&SimSpec {
        study: spec.study,
        n: spec.n,
        seed: spec.seed,
        overrides: spec.overrides.clone(),
    })
    .map_err(|e| crate::Error::Config(e.to_string()))?;
    let truth: Vec<f64> = reported.iter().map(|p| first.truth.params[*p]).collect();

    let jobs: Vec<(usize, usize)> = (0..spec.reps)
        .flat_map(|r| (0..spec.strategies.len()).map(move |s| (r, s)))
        .collect();
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(rep, s)| {
            let sim = SimSpec {
                study: spec.study,
                n: spec.n,
                seed: spec.seed.wrapping_add(rep as u64),
                overrides: spec.overrides.clone(),
            };
            let data = match generate(&sim) {
                Ok(d) => d.data,
                Err(e) => return RunOutcome::Failed(format!("replicate {rep}: {e}")),
            };
            let cfg = EstimateConfig {
                strategy: spec.strategies[s],
                ..spec.config.clone()
            };
            match estimate(&model, &data, &cfg) {
                Ok(res) => RunOutcome::Estimated {
                    values: reported
                        .iter()
                        .map(|p| res.param(p).expect("reported parameter exists"))
                        .collect(),
                    converged: res.diagnostics.converged,
                },
                Err(e) => RunOutcome::Failed(format!("replicate {rep}: {e}")),
            }
        })
        .collect();

    let mut errors: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut counts: Vec<StrategyCounts> = spec
        .strategies
        .iter()
        .map(|s| StrategyCounts {
            strategy: *s,
            successes: 0,
            failures: 0,
            not_converged: 0,
            messages: Vec::new(),
        })
        .collect();
    for ((_, s), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            RunOutcome::Estimated { values, converged } => {
                counts[*s].successes += 1;
                if !converged {
                    counts[*s].not_converged += 1;
                }
                for (p, v) in values.iter().enumerate() {
                    errors.entry((p, *s)).or_default().push(v - truth[p]);
                }
            }
            RunOutcome::Failed(msg) => {
                counts[*s].failures += 1;
                counts[*s].messages.push(msg);
            }
        }
    }

    let mut cells = Vec::new();
    for (p, name) in reported.iter().enumerate() {
        for (s, strategy) in spec.strategies.iter().enumerate() {
            let errs = errors.remove(&(p, s)).unwrap_or_default();
            let (mean_error, sd_error) = if errs.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (crate::stats::mean(&errs), crate::stats::sample_sd(&errs))
            };
            cells.push(CellSummary {
                param: name.to_string(),
                strategy: *strategy,
                true_value: truth[p],
                mean_error,
                sd_error,
                errors: errs,
            });
        }
    }
    Ok(ReplicationReport {
        study: spec.study,
        n: spec.n,
        reps: spec.reps,
        seed: spec.seed,
        cells,
        counts,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::noise_free_params;

    #[test]
    fn models_match_generators() {
        for study in Study::ALL {
            let m = model(study);
            let sim = generate(&SimSpec::new(study, 5, 0)).unwrap();
            assert!(sim.data.bind(&m).is_ok(), "{study}");
            let defaults = crate::simgen::default_params(study);
            for p in reported_params(study) {
                assert!(m.param_index(p).is_some(), "{study}: {p}");
                assert!(defaults.contains_key(*p), "{study}: {p}");
            }
        }
    }

    #[test]
    fn equation_counts() {
        assert_eq!(model(Study::Democracy).n_equations(), 13);
        assert_eq!(model(Study::Ganzach).n_equations(), 10);
        assert_eq!(model(Study::Muthen).n_equations(), 14);
    }

    #[test]
    fn exact_fit_replication() {
        let mut spec = ReplicationSpec::new(
            Study::Regression,
            20,
            2,
            5,
            vec![WeightStrategy::W1, WeightStrategy::Wn],
        );
        spec.overrides = noise_free_params(Study::Regression);
        let report = run_replication(&spec).unwrap();
        for c in &report.cells {
            assert_eq!(c.errors.len(), 2);
            assert!(c.mean_error.abs() < 1e-6, "{c:?}");
        }
        let table = report.table();
        assert!(table.contains("0.000(0.000)"), "{table}");
        assert_eq!(report.to_csv().lines().count(), 3);
    }

    #[test]
    fn rejects_empty_specs() {
        let spec = ReplicationSpec::new(Study::Regression, 20, 0, 5, vec![WeightStrategy::W1]);
        assert!(run_replication(&spec).is_err());
        let spec = ReplicationSpec::new(Study::Regression, 20, 1, 5, vec![]);
        assert!(run_replication(&spec).is_err());
    }
}
