//! Replicated simulation grids over three-component bivariate mixtures.
//!
//! Each grid cell fixes a family (Gaussian or Student), a separation D, a
//! spread (sigma2 or degrees of freedom), and whether posteriors come from
//! the true model or an EM fit. Per replicate the data are sampled, the MAP,
//! thresholded and MFDR-optimal rules are applied, and realized error rates
//! are recorded. With the `parallel` feature replicates run on the rayon
//! pool; [`run_grid_serial`] always produces the same result sequentially.

use nalgebra::dvector;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{optimal_rule, LambdaEstimate};
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate, summary_stats, AggregateReport, EvalReport, SummaryStats};
use crate::mixture::{
    fit_em, match_components, posterior_matrix, sample, EmConfig, GaussianComponent, MixtureModel,
    PosteriorMatrix, StudentComponent,
};
use crate::rules::{map_rule, thresholded_rule, RiskKind, RuleSpec};
use crate::seed::{fnv1a, mix_seed};

/// Mixture family of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Student,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Student => "student",
        }
    }
}

/// Where the posterior probabilities come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorMode {
    /// Exact posteriors from the generating model.
    Known,
    /// Posteriors from a Gaussian mixture fitted by EM (also used on Student
    /// data to study misspecification).
    Estimated,
}

impl PosteriorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PosteriorMode::Known => "known",
            PosteriorMode::Estimated => "estimated",
        }
    }
}

/// One grid cell: model parameters, replication, and rule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub family: Family,
    /// Separation between the middle component and the outer two.
    pub d: f64,
    /// Common component variance (Gaussian family only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    /// Shared degrees of freedom (Student family only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dof: Option<f64>,
    pub n_per_class: usize,
    pub replicates: usize,
    pub alpha: f64,
    /// 1-based classes of interest; all three by default.
    pub interest: Vec<usize>,
    pub posterior_mode: PosteriorMode,
    pub master_seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        match self.family {
            Family::Gaussian => {
                if self.dof.is_some() || !self.sigma2.is_some_and(|s| s > 0.0) {
                    return Err(Error::InvalidParameter(
                        "gaussian scenarios need sigma2 > 0 and no dof".into(),
                    ));
                }
            }
            Family::Student => {
                if self.sigma2.is_some() || !self.dof.is_some_and(|v| v > 2.0) {
                    return Err(Error::InvalidParameter(
                        "student scenarios need dof > 2 and no sigma2".into(),
                    ));
                }
            }
        }
        if self.n_per_class == 0 || self.replicates == 0 {
            return Err(Error::InvalidParameter(
                "n_per_class and replicates must be positive".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        RuleSpec::new(RiskKind::Mfdr, self.alpha, self.interest.clone())?;
        if self.interest.iter().any(|&k| k > 3) {
            return Err(Error::InvalidParameter(
                "interest classes must lie in 1..=3".into(),
            ));
        }
        Ok(())
    }

    /// The spread parameter, whichever family applies.
    pub fn sigma2_or_dof(&self) -> f64 {
        self.sigma2.or(self.dof).expect("validated config")
    }

    /// Canonical identity of the cell; part of the seed derivation so cells
    /// are independent of their position in a grid.
    fn cell_key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{:?}|{}",
            self.family.as_str(),
            self.d,
            self.sigma2_or_dof(),
            self.n_per_class,
            self.alpha,
            self.interest,
            self.posterior_mode.as_str(),
        )
    }

    /// Seeds for one replicate. Exposed so a replicate can be reproduced
    /// standalone (e.g. through the CLI) bit-for-bit.
    pub fn replicate_seeds(&self, replicate: usize) -> ReplicateSeeds {
        let cell = mix_seed(self.master_seed, fnv1a(self.cell_key().as_bytes()));
        let base = mix_seed(cell, replicate as u64);
        ReplicateSeeds {
            sample: mix_seed(base, 1),
            em: mix_seed(base, 2),
        }
    }
}

/// Derived per-replicate seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicateSeeds {
    pub sample: u64,
    pub em: u64,
}

/// The three rules compared in every replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Map,
    Threshold,
    Optimal,
}

impl RuleKind {
    pub const ALL: [RuleKind; 3] = [RuleKind::Map, RuleKind::Threshold, RuleKind::Optimal];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleKind::Map => "map",
            RuleKind::Threshold => "threshold",
            RuleKind::Optimal => "optimal",
        }
    }
}

/// Per-replicate evaluation of the three rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub map: EvalReport,
    pub threshold: EvalReport,
    pub optimal: EvalReport,
    pub lambda: LambdaEstimate,
}

impl ReplicateOutcome {
    pub fn report(&self, rule: RuleKind) -> &EvalReport {
        match rule {
            RuleKind::Map => &self.map,
            RuleKind::Threshold => &self.threshold,
            RuleKind::Optimal => &self.optimal,
        }
    }
}

/// The three-component bivariate preset: centers (-1, 0), (0, D), (1, 0),
/// equal weights. Gaussian components use covariance sigma2 * I; Student
/// components use scale (dof-2)/dof * I so that their covariance is the
/// identity. `spread` is sigma2 or dof depending on the family.
pub fn preset_model(family: Family, d: f64, spread: f64) -> Result<MixtureModel> {
    let centers = [dvector![-1.0, 0.0], dvector![0.0, d], dvector![1.0, 0.0]];
    let weights = vec![1.0 / 3.0; 3];
    match family {
        Family::Gaussian => {
            let comps = centers
                .into_iter()
                .map(|c| GaussianComponent::isotropic(c, spread))
                .collect::<Result<Vec<_>>>()?;
            MixtureModel::gaussian(weights, comps)
        }
        Family::Student => {
            let scale = (spread - 2.0) / spread;
            let comps = centers
                .into_iter()
                .map(|c| {
                    StudentComponent::new(
                        c.clone(),
                        nalgebra::DMatrix::identity(2, 2) * scale,
                        spread,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            MixtureModel::student(weights, comps)
        }
    }
}

/// Builds the generating model of a grid cell.
pub fn build_model(config: &ScenarioConfig) -> Result<MixtureModel> {
    config.validate()?;
    preset_model(config.family, config.d, config.sigma2_or_dof())
}

/// EM settings used by estimated-posterior replicates.
pub fn default_em_config() -> EmConfig {
    EmConfig::default()
}

/// Runs one replicate of a cell: sample, compute posteriors, apply the MAP,
/// thresholded and MFDR-optimal rules, and evaluate against the true labels.
pub fn run_replicate(config: &ScenarioConfig, replicate: usize) -> Result<ReplicateOutcome> {
    let model = build_model(config)?;
    let seeds = config.replicate_seeds(replicate);
    let data = sample(&model, &[config.n_per_class; 3], seeds.sample)?;

    let posteriors: PosteriorMatrix = match config.posterior_mode {
        PosteriorMode::Known => posterior_matrix(&model, data.points())?,
        PosteriorMode::Estimated => {
            let fit = fit_em(data.points(), 3, &default_em_config(), seeds.em)?;
            let raw = posterior_matrix(&fit.model, data.points())?;
            // Undo label switching: column p of the evaluation matrix is the
            // fitted component matched to true class p.
            let assignment = match_components(&fit.model, &model)?;
            let mut aligned = nalgebra::DMatrix::zeros(raw.n(), raw.p());
            for (true_class, &fitted) in assignment.iter().enumerate() {
                for i in 0..raw.n() {
                    aligned[(i, true_class)] = raw.get(i, fitted);
                }
            }
            PosteriorMatrix::new(aligned)?
        }
    };

    let spec = RuleSpec::new(RiskKind::Mfdr, config.alpha, config.interest.clone())?;
    let map_preds = map_rule(&posteriors, spec.interest())?;
    let thr_preds = thresholded_rule(&posteriors, &spec)?;
    let (opt_preds, lambda) = optimal_rule(&posteriors, &spec)?;

    Ok(ReplicateOutcome {
        replicate,
        map: evaluate(&map_preds, data.labels(), spec.interest())?,
        threshold: evaluate(&thr_preds, data.labels(), spec.interest())?,
        optimal: evaluate(&opt_preds, data.labels(), spec.interest())?,
        lambda,
    })
}

/// Per-rule aggregate over the successful replicates of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleAggregate {
    pub rule: RuleKind,
    pub report: AggregateReport,
    /// Fraction of replicates in which the rule classified nothing.
    pub frac_none_classified: f64,
}

/// Aggregates of one cell; `None` when every replicate failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAggregates {
    pub rules: Vec<RuleAggregate>,
    /// Distribution of finite lambda estimates (optimal rule).
    pub lambda_hat: Option<SummaryStats>,
    /// Distribution of the tau*-scale thresholds, where defined.
    pub tau_threshold: Option<SummaryStats>,
}

/// All results of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub config: ScenarioConfig,
    pub outcomes: Vec<ReplicateOutcome>,
    /// Replicates whose fit failed, with the failure message.
    pub failures: Vec<(usize, String)>,
    pub aggregates: Option<CellAggregates>,
}

/// Results for every cell of a grid, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<CellResult>,
}

fn job_list(cells: &[ScenarioConfig]) -> Result<Vec<(usize, usize)>> {
    let mut jobs = Vec::new();
    for (idx, cell) in cells.iter().enumerate() {
        cell.validate()?;
        jobs.extend((0..cell.replicates).map(|r| (idx, r)));
    }
    Ok(jobs)
}

fn reduce(
    cells: &[ScenarioConfig],
    results: Vec<(usize, usize, Result<ReplicateOutcome>)>,
) -> GridResult {
    let mut grid: Vec<CellResult> = cells
        .iter()
        .map(|config| CellResult {
            config: config.clone(),
            outcomes: Vec::new(),
            failures: Vec::new(),
            aggregates: None,
        })
        .collect();
    for (idx, replicate, outcome) in results {
        match outcome {
            Ok(o) => grid[idx].outcomes.push(o),
            Err(e) => grid[idx].failures.push((replicate, e.to_string())),
        }
    }
    for cell in &mut grid {
        cell.aggregates = aggregate_cell(&cell.outcomes);
    }
    GridResult { cells: grid }
}

fn aggregate_cell(outcomes: &[ReplicateOutcome]) -> Option<CellAggregates> {
    if outcomes.is_empty() {
        return None;
    }
    let rules = RuleKind::ALL
        .iter()
        .map(|&rule| {
            let reports: Vec<EvalReport> =
                outcomes.iter().map(|o| o.report(rule).clone()).collect();
            let none = reports.iter().filter(|r| r.none_classified()).count();
            RuleAggregate {
                rule,
                report: aggregate(&reports).expect("nonempty"),
                frac_none_classified: none as f64 / reports.len() as f64,
            }
        })
        .collect();
    let lambdas: Vec<f64> = outcomes
        .iter()
        .map(|o| o.lambda.lambda_hat)
        .filter(|l| l.is_finite())
        .collect();
    let taus: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.lambda.tau_scale_threshold)
        .collect();
    Some(CellAggregates {
        rules,
        lambda_hat: summary_stats(&lambdas).ok(),
        tau_threshold: summary_stats(&taus).ok(),
    })
}

/// Runs every replicate of every cell, in parallel when the `parallel`
/// feature is enabled. Results are keyed by (cell, replicate), so the output
/// is identical however the work is scheduled.
pub fn run_grid(cells: &[ScenarioConfig]) -> Result<GridResult> {
    let jobs = job_list(cells)?;
    #[cfg(feature = "parallel")]
    let results: Vec<_> = jobs
        .into_par_iter()
        .map(|(idx, r)| (idx, r, run_replicate(&cells[idx], r)))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = jobs
        .into_iter()
        .map(|(idx, r)| (idx, r, run_replicate(&cells[idx], r)))
        .collect();
    Ok(reduce(cells, results))
}

/// Sequential twin of [`run_grid`]; same output, one thread.
pub fn run_grid_serial(cells: &[ScenarioConfig]) -> Result<GridResult> {
    let jobs = job_list(cells)?;
    let results: Vec<_> = jobs
        .into_iter()
        .map(|(idx, r)| (idx, r, run_replicate(&cells[idx], r)))
        .collect();
    Ok(reduce(cells, results))
}

/// Cross-product description of a grid, as read from a JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub family: Family,
    pub d_values: Vec<f64>,
    #[serde(default)]
    pub sigma2_values: Vec<f64>,
    #[serde(default)]
    pub dof_values: Vec<f64>,
    pub n_per_class: usize,
    pub replicates: usize,
    pub alpha: f64,
    /// 1-based classes of interest; all classes when omitted.
    #[serde(default)]
    pub interest: Option<Vec<usize>>,
    pub posterior_mode: PosteriorMode,
    pub master_seed: u64,
}

impl GridConfig {
    /// Expands the cross product into per-cell configs.
    pub fn expand(&self) -> Result<Vec<ScenarioConfig>> {
        let spreads = match self.family {
            Family::Gaussian => &self.sigma2_values,
            Family::Student => &self.dof_values,
        };
        if self.d_values.is_empty() || spreads.is_empty() {
            return Err(Error::InvalidParameter(
                "grid needs nonempty d values and spread values".into(),
            ));
        }
        let interest = self.interest.clone().unwrap_or_else(|| vec![1, 2, 3]);
        let mut cells = Vec::with_capacity(self.d_values.len() * spreads.len());
        for &d in &self.d_values {
            for &spread in spreads {
                let cell = ScenarioConfig {
                    family: self.family,
                    d,
                    sigma2: (self.family == Family::Gaussian).then_some(spread),
                    dof: (self.family == Family::Student).then_some(spread),
                    n_per_class: self.n_per_class,
                    replicates: self.replicates,
                    alpha: self.alpha,
                    interest: interest.clone(),
                    posterior_mode: self.posterior_mode,
                    master_seed: self.master_seed,
                };
                cell.validate()?;
                cells.push(cell);
            }
        }
        Ok(cells)
    }
}
