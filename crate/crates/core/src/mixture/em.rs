//! EM fitting for Gaussian mixtures with full covariance matrices.
//!
//! Initialization is k-means++-style seeding of the means, pooled sample
//! covariance for every component, uniform weights. Each restart runs from a
//! fresh derived seed; the best final log-likelihood wins. A restart is
//! abandoned as degenerate when a component's responsibility mass drops below
//! d+1 effective points.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::density::PreparedComponent;
use super::{GaussianComponent, MixtureModel};
use crate::error::{Error, Result};
use crate::seed::mix_seed;

/// EM stopping and robustness knobs.
#[derive(Debug, Clone)]
pub struct EmConfig {
    pub max_iterations: usize,
    pub loglik_tolerance: f64,
    pub n_restarts: usize,
    /// Lower bound enforced on every covariance eigenvalue.
    pub covariance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            loglik_tolerance: 1e-6,
            n_restarts: 5,
            covariance_floor: 1e-6,
        }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.n_restarts == 0 {
            return Err(Error::InvalidParameter(
                "max_iterations and n_restarts must be positive".into(),
            ));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.loglik_tolerance) || !positive(self.covariance_floor) {
            return Err(Error::InvalidParameter(
                "loglik_tolerance and covariance_floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A fitted model together with its convergence record.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: MixtureModel,
    pub log_likelihood: f64,
    pub n_iterations: usize,
    /// Log-likelihood after each E-step, including the final one.
    pub loglik_trace: Vec<f64>,
}

/// Fits a P-component Gaussian mixture to the rows of `points`.
pub fn fit_em(points: &DMatrix<f64>, p: usize, config: &EmConfig, seed: u64) -> Result<EmFit> {
    config.validate()?;
    let n = points.nrows();
    let d = points.ncols();
    if p < 2 {
        return Err(Error::InvalidParameter(format!(
            "need P >= 2 components, got {p}"
        )));
    }
    if n < p * (d + 1) {
        return Err(Error::InvalidInput(format!(
            "need at least P*(d+1) = {} observations, got {n}",
            p * (d + 1)
        )));
    }

    let mut best: Option<EmFit> = None;
    let mut last_failure = String::from("no restarts run");
    for restart in 0..config.n_restarts {
        match run_single(points, p, config, mix_seed(seed, restart as u64)) {
            Ok(fit) => {
                if best
                    .as_ref()
                    .is_none_or(|b| fit.log_likelihood > b.log_likelihood)
                {
                    best = Some(fit);
                }
            }
            Err(e) => last_failure = e.to_string(),
        }
    }
    best.ok_or_else(|| Error::FitFailed(format!("all restarts degenerate: {last_failure}")))
}

struct Params {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

fn run_single(points: &DMatrix<f64>, p: usize, config: &EmConfig, seed: u64) -> Result<EmFit> {
    let n = points.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(points, p, config.covariance_floor, &mut rng);

    let mut trace: Vec<f64> = Vec::new();
    let mut resp = vec![0.0; n * p];
    loop {
        let ll = e_step(points, &params, &mut resp)?;
        trace.push(ll);
        let it = trace.len() - 1;
        let converged = it > 0 && ll - trace[it - 1] < config.loglik_tolerance;
        if converged || it == config.max_iterations {
            break;
        }
        params = m_step(points, &resp, p, config.covariance_floor)?;
    }

    let components = params
        .means
        .into_iter()
        .zip(params.covs)
        .map(|(mean, cov)| GaussianComponent::new(mean, cov))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmFit {
        model: MixtureModel::gaussian(params.weights, components)?,
        log_likelihood: *trace.last().expect("at least one E-step"),
        n_iterations: trace.len() - 1,
        loglik_trace: trace,
    })
}

fn init_params(points: &DMatrix<f64>, p: usize, floor: f64, rng: &mut ChaCha8Rng) -> Params {
    let n = points.nrows();
    let d = points.ncols();

    // k-means++ seeding of the means.
    let mut means: Vec<DVector<f64>> = Vec::with_capacity(p);
    let first = rng.random_range(0..n);
    means.push(points.row(first).transpose());
    let mut d2: Vec<f64> = (0..n)
        .map(|i| (points.row(i).transpose() - &means[0]).norm_squared())
        .collect();
    while means.len() < p {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let center = points.row(idx).transpose();
        for (i, nearest) in d2.iter_mut().enumerate() {
            let dist = (points.row(i).transpose() - &center).norm_squared();
            if dist < *nearest {
                *nearest = dist;
            }
        }
        means.push(center);
    }

    // Pooled covariance and uniform weights for every component.
    let grand_mean = DVector::from_fn(d, |j, _| points.column(j).mean());
    let mut pooled = DMatrix::zeros(d, d);
    for i in 0..n {
        let diff = points.row(i).transpose() - &grand_mean;
        pooled.ger(1.0, &diff, &diff, 1.0);
    }
    pooled /= n as f64;
    let pooled = clamp_eigenvalues(&pooled, floor);

    Params {
        weights: vec![1.0 / p as f64; p],
        covs: vec![pooled; p],
        means,
    }
}

/// Fills `resp` with responsibilities and returns the log-likelihood.
fn e_step(points: &DMatrix<f64>, params: &Params, resp: &mut [f64]) -> Result<f64> {
    let n = points.nrows();
    let p = params.weights.len();
    let prepared = params
        .means
        .iter()
        .zip(&params.covs)
        .map(|(mean, cov)| {
            PreparedComponent::gaussian(&GaussianComponent::new(mean.clone(), cov.clone())?)
        })
        .collect::<Result<Vec<_>>>()?;
    let log_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();

    let mut ll = 0.0;
    let mut logs = vec![0.0; p];
    for i in 0..n {
        let x = points.row(i).transpose();
        for k in 0..p {
            logs[k] = log_w[k] + prepared[k].log_density(&x);
        }
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..p {
            let e = (logs[k] - m).exp();
            resp[i * p + k] = e;
            sum += e;
        }
        for k in 0..p {
            resp[i * p + k] /= sum;
        }
        ll += m + sum.ln();
    }
    Ok(ll)
}

fn m_step(points: &DMatrix<f64>, resp: &[f64], p: usize, floor: f64) -> Result<Params> {
    let n = points.nrows();
    let d = points.ncols();
    let mut weights = vec![0.0; p];
    let mut means = Vec::with_capacity(p);
    let mut covs = Vec::with_capacity(p);
    for k in 0..p {
        let nk: f64 = (0..n).map(|i| resp[i * p + k]).sum();
        if nk < (d + 1) as f64 {
            return Err(Error::FitFailed(format!(
                "component {} collapsed to {nk:.2} effective points",
                k + 1
            )));
        }
        let mut mean = DVector::zeros(d);
        for i in 0..n {
            mean.axpy(resp[i * p + k], &points.row(i).transpose(), 1.0);
        }
        mean /= nk;
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..n {
            let diff = points.row(i).transpose() - &mean;
            cov.ger(resp[i * p + k], &diff, &diff, 1.0);
        }
        cov /= nk;
        weights[k] = nk / n as f64;
        means.push(mean);
        covs.push(clamp_eigenvalues(&cov, floor));
    }
    Ok(Params {
        weights,
        means,
        covs,
    })
}

/// Projects a symmetric matrix onto the cone of matrices whose eigenvalues
/// are all at least `floor`.
fn clamp_eigenvalues(matrix: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (matrix + matrix.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    for v in eig.eigenvalues.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    let rec = eig.recompose();
    (&rec + rec.transpose()) * 0.5
}
