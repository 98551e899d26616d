//! `clssem` command-line front end: estimation, simulation, replication
//! studies and permutation fit tests.
//!
//! Exit codes: 0 on success, 2 when an estimate was produced but the
//! optimizer did not converge, 1 on any error (including usage errors).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use clssem::fit::{permutation_null_fit, PermutationFit, PermutationOptions};
use clssem::study::{run_replication, ReplicationSpec};
use clssem::{
    estimate, generate, parse_model_file, residual_mean_r, Dataset, DfMode, EstimateConfig,
    EstimationResult, Model, SimSpec, Study, WeightStrategy,
};
use serde_json::Value;

#[derive(Debug, Parser)]
#[command(
    name = "clssem",
    version,
    about = "Case-based least-squares structural equation modelling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate a model from case-level data.
    Estimate(EstimateArgs),
    /// Draw a dataset from one of the built-in simulation studies.
    Simulate(SimulateArgs),
    /// Repeat a simulation study and tabulate estimation errors.
    Replicate(ReplicateArgs),
    /// Compare F_min with F_min on column-permuted data.
    Permtest(PermtestArgs),
}

/// Estimation settings shared by every command that fits a model.
#[derive(Debug, Args)]
struct FitArgs {
    /// Settings file of `key = value` lines; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Penalty for soft constraints without their own constant.
    #[arg(long)]
    penalty: Option<f64>,
    /// Optimizer seed (data seed for `replicate`).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of optimizer starts.
    #[arg(long)]
    multistart: Option<usize>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Weight strategy: w1, wn, ww, wo or wa.
    #[arg(long)]
    strategy: WeightStrategy,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    input: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Write the result as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the latent scores as CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Write the residuals as CSV.
    #[arg(long)]
    residuals: Option<PathBuf>,
    /// Add a chi-square statistic with this df rule (naive or equations).
    #[arg(long)]
    chi_square: Option<DfMode>,
    /// Skip the local uniqueness check.
    #[arg(long)]
    no_uniqueness: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    study: Study,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Override a generating value, `name=value`; repeatable.
    #[arg(long = "param", value_parser = parse_assignment)]
    params: Vec<(String, f64)>,
    #[arg(long)]
    out: PathBuf,
    /// Write the generating values and latent scores as JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplicateArgs {
    #[arg(long)]
    study: Study,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 25)]
    reps: usize,
    /// Comma-separated weight strategies.
    #[arg(long, value_delimiter = ',', default_value = "w1")]
    strategies: Vec<WeightStrategy>,
    #[arg(long = "param", value_parser = parse_assignment)]
    params: Vec<(String, f64)>,
    /// With `replicate`, `--seed` is the data seed of the first replicate
    /// (replicate r uses seed + r); the optimizer seed comes from the
    /// settings file.
    #[command(flatten)]
    fit: FitArgs,
    /// Write the summary table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PermtestArgs {
    #[command(flatten)]
    input: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Number of permuted datasets; 0 reports the fit alone.
    #[arg(long, default_value_t = 100)]
    perms: usize,
    /// Seed of the column permutations.
    #[arg(long, default_value_t = 0)]
    perm_seed: u64,
    /// Debug: keep every column in its original order.
    #[arg(long)]
    identity_perm: bool,
    /// Write the result, including the null samples, as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_assignment(text: &str) -> Result<(String, f64), String> {
    let (name, value) = text
        .split_once('=')
        .ok_or_else(|| format!("expected name=value, got `{text}`"))?;
    let value = value
        .trim()
        .parse::<f64>()
        .map_err(|e| format!("`{}`: {e}", value.trim()))?;
    Ok((name.trim().to_string(), value))
}

/// Reads `key = value` lines; `#` starts a comment.
fn read_settings(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), k + 1))?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

/// Sets `key` in the serialized configuration. Bare keys are looked up at
/// the top level, then in the `optimizer` and `weights` sections.
fn apply_setting(config: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value =
        serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => (Some(s), f),
        None => (None, key),
    };
    let sections: Vec<Option<&str>> = match section {
        Some(s) => vec![Some(s)],
        None => vec![None, Some("optimizer"), Some("weights")],
    };
    for s in sections {
        let target = match s {
            None => Some(&mut *config),
            Some(name) => config.get_mut(name),
        };
        if let Some(Value::Object(map)) = target {
            if let Some(slot) = map.get_mut(field) {
                *slot = value;
                return Ok(());
            }
        }
    }
    bail!("unknown setting `{key}`")
}

/// Defaults, then the settings file, then flags.
fn build_config(
    fit: &FitArgs,
    strategy: Option<WeightStrategy>,
) -> Result<(EstimateConfig, Option<usize>)> {
    let mut json = serde_json::to_value(EstimateConfig::default())?;
    let mut jobs = None;
    if let Some(path) = &fit.config {
        for (key, value) in read_settings(path)? {
            if key == "jobs" {
                jobs = Some(
                    value
                        .parse()
                        .with_context(|| format!("{}: jobs must be an integer", path.display()))?,
                );
                continue;
            }
            apply_setting(&mut json, &key, &value)
                .with_context(|| format!("in {}", path.display()))?;
        }
    }
    let mut cfg: EstimateConfig = serde_json::from_value(json).context("invalid settings")?;
    if let Some(s) = strategy {
        cfg.strategy = s;
    }
    if let Some(p) = fit.penalty {
        cfg.penalty = Some(p);
    }
    if let Some(s) = fit.seed {
        cfg.optimizer.seed = s;
    }
    if let Some(k) = fit.multistart {
        cfg.optimizer.multistart = k;
    }
    Ok((cfg, fit.jobs.or(jobs)))
}

fn configure_pool(jobs: Option<usize>) -> Result<()> {
    if let Some(j) = jobs {
        if j == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("starting the worker pool")?;
    }
    Ok(())
}

fn load(input: &ModelArgs) -> Result<(Model, Dataset)> {
    let model = parse_model_file(&input.model)
        .with_context(|| format!("model file {}", input.model.display()))?;
    let data = Dataset::from_csv_path(&input.data)
        .with_context(|| format!("data file {}", input.data.display()))?;
    Ok((model, data))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn print_summary(r: &EstimationResult) {
    let d = &r.diagnostics;
    println!("strategy   {}", d.strategy);
    println!(
        "converged  {} ({:?}, gradient norm {:.3e})",
        d.converged, d.termination, d.grad_norm
    );
    println!("F_min      {:.6e}", r.f_min);
    println!("R          {:.6e}", r.fit.r);
    for p in &r.params {
        println!(
            "  {:<12} {:>12.6}{}",
            p.name,
            p.value,
            if p.fixed { "  (fixed)" } else { "" }
        );
    }
    println!(
        "weights    {}",
        r.weights
            .iter()
            .map(|w| format!("{w:.4e}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    if let Some(u) = &d.uniqueness {
        println!("curvature  {:?}", u.classification);
    }
    if let Some(chi) = &r.fit.chi_square {
        println!(
            "chi-square {:.3} on {} df ({}), p = {:.4}",
            chi.statistic, chi.df, chi.mode, chi.p_value
        );
    }
    if let Some(note) = &d.normalization {
        println!("note: {note}");
    }
    for w in &d.warnings {
        eprintln!("warning: {w}");
    }
}

fn status(r: &EstimationResult) -> ExitCode {
    if r.diagnostics.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn cmd_estimate(args: EstimateArgs) -> Result<ExitCode> {
    let (mut cfg, jobs) = build_config(&args.fit, Some(args.input.strategy))?;
    configure_pool(jobs)?;
    if args.chi_square.is_some() {
        cfg.chi_square = args.chi_square;
    }
    if args.no_uniqueness {
        cfg.check_uniqueness = false;
    }
    let (model, data) = load(&args.input)?;
    let r = estimate(&model, &data, &cfg)?;
    print_summary(&r);
    if let Some(path) = &args.out {
        write(path, &r.to_json()?)?;
    }
    if let Some(path) = &args.scores {
        write(path, &r.scores_csv()?)?;
    }
    if let Some(path) = &args.residuals {
        write(path, &r.residuals_csv()?)?;
    }
    Ok(status(&r))
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    let mut spec = SimSpec::new(args.study, args.n, args.seed);
    spec.overrides = args.params.into_iter().collect();
    let sim = generate(&spec)?;
    let file =
        fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    sim.data
        .write_csv(file)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.truth {
        write(path, &serde_json::to_string_pretty(&sim.truth)?)?;
    }
    println!(
        "wrote {} cases of study {} to {}",
        args.n,
        args.study,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_replicate(args: ReplicateArgs) -> Result<ExitCode> {
    let data_seed = args.fit.seed.unwrap_or(1);
    let fit = FitArgs {
        seed: None,
        ..args.fit
    };
    let (cfg, jobs) = build_config(&fit, None)?;
    configure_pool(jobs)?;
    let mut spec = ReplicationSpec::new(args.study, args.n, args.reps, data_seed, args.strategies);
    spec.overrides = args.params.into_iter().collect();
    spec.config = EstimateConfig {
        check_uniqueness: false,
        ..cfg
    };
    let report = run_replication(&spec)?;
    print!("{}", report.table());
    for c in &report.counts {
        println!(
            "{}: {} fitted, {} not converged, {} failed",
            c.strategy, c.successes, c.not_converged, c.failures
        );
        for m in &c.messages {
            eprintln!("  {m}");
        }
    }
    println!("wall time {:.1}s", report.wall_time_secs);
    if let Some(path) = &args.out {
        write(path, &report.to_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn print_permutation(p: &PermutationFit) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6e}"));
    println!(
        "null F_min  min {}  median {}  max {}",
        fmt(p.null_min),
        fmt(p.null_median),
        fmt(p.null_max)
    );
    println!("replicates  {} ({} failed)", p.samples.len(), p.failures);
    println!("exceedance  {:.4}", p.exceedance_fraction);
}

fn cmd_permtest(args: PermtestArgs) -> Result<ExitCode> {
    let (cfg, jobs) = build_config(&args.fit, Some(args.input.strategy))?;
    configure_pool(jobs)?;
    let (model, data) = load(&args.input)?;
    let mut r = estimate(&model, &data, &cfg)?;
    println!("F_min       {:.6e}", r.f_min);
    println!(
        "R           {:.6e}",
        residual_mean_r(r.f_min, r.n_cases(), r.n_equations())
    );
    if args.perms > 0 {
        let opts = PermutationOptions {
            reps: args.perms,
            seed: args.perm_seed,
            identity: args.identity_perm,
        };
        let perm = permutation_null_fit(&model, &data, &cfg, r.f_min, opts)?;
        print_permutation(&perm);
        r.fit.permutation = Some(perm);
    }
    if let Some(note) = &r.diagnostics.normalization {
        println!("note: {note}");
    }
    if let Some(path) = &args.out {
        write(path, &r.to_json()?)?;
    }
    Ok(status(&r))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Replicate(a) => cmd_replicate(a),
        Command::Permtest(a) => cmd_permtest(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
