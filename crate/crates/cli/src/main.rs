//! `mixctl`: simulate mixture data, fit Gaussian mixtures, classify with
//! error-rate-controlled rules, evaluate against labels, and run replicated
//! sweeps.
//!
//! All subcommands are deterministic given their inputs and seed; data goes
//! to files or stdout, diagnostics to stderr. The `MIXCTL_SEED` environment
//! variable overrides `--seed` wherever one is accepted.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mixctl_core::control::optimal_rule;
use mixctl_core::eval::evaluate;
use mixctl_core::io;
use mixctl_core::mixture::{
    fit_em, posterior_matrix, sample, EmConfig, MixtureModel, PosteriorMatrix,
};
use mixctl_core::rules::{
    apply_lambda, map_rule, thresholded_rule, PredictionVector, RiskKind, RuleSpec,
};
use mixctl_core::sim::{preset_model, run_grid, Family};

#[derive(Parser)]
#[command(
    name = "mixctl",
    version,
    about = "Error-rate-controlled classification for mixture models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample labeled data from a mixture model
    Simulate(SimulateArgs),
    /// Fit a Gaussian mixture by EM
    Fit(FitArgs),
    /// Apply a classification rule to posterior probabilities
    Classify(ClassifyArgs),
    /// Compare predictions with true labels
    Evaluate(EvaluateArgs),
    /// Run a replicated simulation grid from a JSON config
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Model JSON file to sample from
    #[arg(long, conflicts_with = "preset")]
    model: Option<PathBuf>,
    /// Built-in 3-component preset, e.g. "d=3,sigma2=0.5" or "d=1,dof=5"
    #[arg(long)]
    preset: Option<String>,
    /// Observations per class: one count for all, or a comma list per class
    #[arg(long, default_value = "200")]
    n_per_class: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output sample CSV
    #[arg(long)]
    out: PathBuf,
    /// Also write the model that was sampled from
    #[arg(long)]
    emit_model: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Input sample CSV (x1..xd columns; a label column is ignored)
    #[arg(long)]
    sample: PathBuf,
    /// Number of mixture components
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Lower bound on covariance eigenvalues
    #[arg(long, default_value_t = 1e-6)]
    floor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RiskArg {
    Mfdr,
    Mnpr,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Map,
    Threshold,
    Optimal,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Posterior CSV (tau_1..tau_P); alternative to --model + --sample
    #[arg(long, conflicts_with_all = ["model", "sample"])]
    posteriors: Option<PathBuf>,
    /// Model JSON used to compute posteriors from --sample
    #[arg(long, requires = "sample")]
    model: Option<PathBuf>,
    /// Sample CSV whose rows are classified
    #[arg(long, requires = "model")]
    sample: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RiskArg::Mfdr)]
    risk: RiskArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Comma list of 1-based classes of interest; all classes by default
    #[arg(long)]
    interest: Option<String>,
    #[arg(long, value_enum, required_unless_present = "lambda")]
    rule: Option<RuleArg>,
    /// Apply a previously estimated lambda: restricted MAP on the rows whose
    /// criterion reaches it
    #[arg(long, conflicts_with = "rule")]
    lambda: Option<f64>,
    /// Output prediction CSV
    #[arg(long)]
    out: PathBuf,
    /// Where to write the lambda estimate JSON (optimal rule)
    #[arg(long)]
    lambda_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction CSV (label column, 0 = abstain)
    #[arg(long)]
    predictions: PathBuf,
    /// CSV holding the true labels (label column; sample files work)
    #[arg(long)]
    labels: PathBuf,
    /// Comma list of 1-based classes of interest; all observed by default
    #[arg(long)]
    interest: Option<String>,
    /// Optional path for the report JSON (also printed to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Grid config JSON
    #[arg(long)]
    grid: PathBuf,
    /// Output directory for results.csv and aggregate.csv
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for replicates (defaults to the number of cores)
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Classify(args) => cmd_classify(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

/// `MIXCTL_SEED` wins over the flag when set.
fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var("MIXCTL_SEED") {
        Ok(text) => text
            .trim()
            .parse()
            .with_context(|| format!("MIXCTL_SEED is not a valid seed: {text:?}")),
        Err(_) => Ok(flag),
    }
}

fn parse_preset(text: &str) -> Result<MixtureModel> {
    let mut d = None;
    let mut sigma2 = None;
    let mut dof = None;
    for part in text.split(',') {
        let (key, value) = part
            .split_once('=')
            .with_context(|| format!("preset entries look like key=value, got {part:?}"))?;
        let value: f64 = value
            .trim()
            .parse()
            .with_context(|| format!("bad preset value in {part:?}"))?;
        match key.trim().to_ascii_lowercase().as_str() {
            "d" => d = Some(value),
            "sigma2" => sigma2 = Some(value),
            "dof" | "nu" => dof = Some(value),
            other => bail!("unknown preset key {other:?} (use d, sigma2, dof)"),
        }
    }
    let d = d.context("preset needs d=<separation>")?;
    match (sigma2, dof) {
        (Some(s), None) => Ok(preset_model(Family::Gaussian, d, s)?),
        (None, Some(v)) => Ok(preset_model(Family::Student, d, v)?),
        _ => bail!("preset needs exactly one of sigma2=... or dof=..."),
    }
}

fn parse_counts(text: &str, p: usize) -> Result<Vec<usize>> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad per-class counts {text:?}"))?;
    match parts.len() {
        1 => Ok(vec![parts[0]; p]),
        n if n == p => Ok(parts),
        n => bail!("{n} per-class counts for {p} components"),
    }
}

fn parse_interest(text: Option<&str>, p: usize) -> Result<Vec<usize>> {
    match text {
        None => Ok((1..=p).collect()),
        Some(t) => t
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("bad interest list {t:?}")),
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let model = match (&args.model, &args.preset) {
        (Some(path), None) => io::read_model(path)?,
        (None, Some(preset)) => parse_preset(preset)?,
        _ => bail!("simulate needs exactly one of --model or --preset"),
    };
    let counts = parse_counts(&args.n_per_class, model.n_components())?;
    let seed = effective_seed(args.seed)?;
    let data = sample(&model, &counts, seed)?;
    io::write_sample(&args.out, &data)?;
    if let Some(path) = &args.emit_model {
        io::write_model(path, &model)?;
    }
    eprintln!(
        "wrote {} observations to {}",
        data.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let (points, _) = io::read_sample(&args.sample)?;
    let config = EmConfig {
        max_iterations: args.max_iter,
        loglik_tolerance: args.tol,
        n_restarts: args.restarts,
        covariance_floor: args.floor,
    };
    let seed = effective_seed(args.seed)?;
    let fit = fit_em(&points, args.classes, &config, seed)?;
    io::write_model(&args.out, &fit.model)?;
    eprintln!(
        "fitted {} components in {} iterations, log-likelihood {:.6}",
        args.classes, fit.n_iterations, fit.log_likelihood
    );
    Ok(())
}

fn load_posteriors(args: &ClassifyArgs) -> Result<PosteriorMatrix> {
    match (&args.posteriors, &args.model, &args.sample) {
        (Some(path), None, None) => Ok(io::read_posteriors(path)?),
        (None, Some(model_path), Some(sample_path)) => {
            let model = io::read_model(model_path)?;
            let (points, _) = io::read_sample(sample_path)?;
            Ok(posterior_matrix(&model, &points)?)
        }
        _ => bail!("classify needs --posteriors or both --model and --sample"),
    }
}

fn cmd_classify(args: ClassifyArgs) -> Result<()> {
    let posteriors = load_posteriors(&args)?;
    let interest = parse_interest(args.interest.as_deref(), posteriors.p())?;
    let risk = match args.risk {
        RiskArg::Mfdr => RiskKind::Mfdr,
        RiskArg::Mnpr => RiskKind::Mnpr,
    };
    let spec = RuleSpec::new(risk, args.alpha, interest.clone())?;

    let predictions: PredictionVector = if let Some(lambda) = args.lambda {
        apply_lambda(&posteriors, &spec, lambda)?
    } else {
        match args.rule.expect("clap enforces rule or lambda") {
            RuleArg::Map => map_rule(&posteriors, &interest)?,
            RuleArg::Threshold => thresholded_rule(&posteriors, &spec)?,
            RuleArg::Optimal => {
                let (preds, estimate) = optimal_rule(&posteriors, &spec)?;
                let json = serde_json::to_string_pretty(&estimate)?;
                println!("{json}");
                if let Some(path) = &args.lambda_out {
                    std::fs::write(path, format!("{json}\n"))?;
                }
                preds
            }
        }
    };
    io::write_predictions(&args.out, &predictions)?;
    eprintln!(
        "classified {} of {} rows",
        predictions.n_classified(),
        predictions.len()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let predicted = io::read_labels(&args.predictions)?;
    let truth = io::read_labels(&args.labels)?;
    let p = predicted
        .iter()
        .chain(&truth)
        .copied()
        .max()
        .context("no labels to evaluate")?;
    let interest = parse_interest(args.interest.as_deref(), p)?;
    let predictions = PredictionVector::new(predicted, &interest)?;
    let report = evaluate(&predictions, &truth, &interest)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = &args.out {
        std::fs::write(path, format!("{json}\n"))?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("failed to size the worker pool")?;
    }
    #[cfg(not(feature = "parallel"))]
    if args.jobs.is_some() {
        eprintln!("note: built without the parallel feature, --jobs is ignored");
    }

    let grid_config = io::read_grid_config(&args.grid)?;
    let cells = grid_config.expand()?;
    eprintln!(
        "running {} cells x {} replicates",
        cells.len(),
        grid_config.replicates
    );
    let grid = run_grid(&cells)?;

    std::fs::create_dir_all(&args.out)?;
    let results_path = args.out.join("results.csv");
    let aggregate_path = args.out.join("aggregate.csv");
    io::write_results_file(&results_path, &grid)?;
    io::write_aggregates_file(&aggregate_path, &grid)?;

    let mut failed = 0usize;
    for cell in &grid.cells {
        for (replicate, message) in &cell.failures {
            failed += 1;
            eprintln!(
                "warning: cell D={} spread={} replicate {replicate} failed: {message}",
                cell.config.d,
                cell.config.sigma2_or_dof()
            );
        }
    }
    eprintln!(
        "wrote {} and {} ({failed} failed replicates excluded)",
        results_path.display(),
        aggregate_path.display()
    );
    Ok(())
}
