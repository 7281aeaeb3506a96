//! Mixture-model representation, exact densities and posteriors, seeded
//! sampling, and EM fitting for Gaussian mixtures.
//!
//! All types are immutable after construction; sampling and fitting are pure
//! functions of their inputs and a 64-bit seed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

mod density;
mod em;

pub use density::ModelDensity;
pub use em::{fit_em, EmConfig, EmFit};

/// Tolerance on mixture weights summing to one.
const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Tolerance on posterior rows summing to one.
const ROW_SUM_TOL: f64 = 1e-9;

fn check_spd(matrix: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !matrix.is_square() {
        return Err(Error::InvalidParameter(format!("{what} must be square")));
    }
    let scale = matrix.amax().max(1.0);
    for i in 0..matrix.nrows() {
        for j in 0..i {
            if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-9 * scale {
                return Err(Error::InvalidParameter(format!("{what} is not symmetric")));
            }
        }
    }
    Cholesky::new(matrix.clone())
        .ok_or_else(|| Error::InvalidParameter(format!("{what} is not positive definite")))
}

/// One Gaussian mixture component with full covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        check_spd(&covariance, "covariance")?;
        Ok(Self { mean, covariance })
    }

    /// Isotropic component: covariance `sigma2 * I`.
    pub fn isotropic(mean: DVector<f64>, sigma2: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * sigma2)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log of the multivariate normal pdf at `x`.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(density::PreparedComponent::gaussian(self)?.log_density(x))
    }

    /// Multivariate normal pdf at `x`.
    pub fn density(&self, x: &DVector<f64>) -> Result<f64> {
        self.log_density(x).map(f64::exp)
    }
}

/// One multivariate Student component. `dof > 2` so the covariance
/// `dof / (dof - 2) * scale` exists.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentComponent {
    location: DVector<f64>,
    scale: DMatrix<f64>,
    dof: f64,
}

impl StudentComponent {
    pub fn new(location: DVector<f64>, scale: DMatrix<f64>, dof: f64) -> Result<Self> {
        if scale.nrows() != location.len() {
            return Err(Error::DimensionMismatch(format!(
                "location has length {} but scale is {}x{}",
                location.len(),
                scale.nrows(),
                scale.ncols()
            )));
        }
        if !dof.is_finite() || dof <= 2.0 {
            return Err(Error::InvalidParameter(format!(
                "degrees of freedom must exceed 2, got {dof}"
            )));
        }
        check_spd(&scale, "scale")?;
        Ok(Self {
            location,
            scale,
            dof,
        })
    }

    pub fn location(&self) -> &DVector<f64> {
        &self.location
    }

    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    /// Log of the multivariate Student pdf at `x`.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(density::PreparedComponent::student(self)?.log_density(x))
    }

    /// Multivariate Student pdf at `x`.
    pub fn density(&self, x: &DVector<f64>) -> Result<f64> {
        self.log_density(x).map(f64::exp)
    }
}

/// Component list of a mixture; one family per model.
#[derive(Debug, Clone, PartialEq)]
pub enum MixtureComponents {
    Gaussian(Vec<GaussianComponent>),
    Student(Vec<StudentComponent>),
}

impl MixtureComponents {
    pub fn len(&self) -> usize {
        match self {
            Self::Gaussian(v) => v.len(),
            Self::Student(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self, idx: usize) -> usize {
        match self {
            Self::Gaussian(v) => v[idx].dim(),
            Self::Student(v) => v[idx].dim(),
        }
    }

    /// Mean vector (Gaussian) or location (Student) of component `idx`.
    pub fn center(&self, idx: usize) -> &DVector<f64> {
        match self {
            Self::Gaussian(v) => v[idx].mean(),
            Self::Student(v) => v[idx].location(),
        }
    }
}

/// A finite mixture: weights plus homogeneous-family components.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    weights: Vec<f64>,
    components: MixtureComponents,
}

impl MixtureModel {
    pub fn new(weights: Vec<f64>, components: MixtureComponents) -> Result<Self> {
        let p = components.len();
        if p < 2 {
            return Err(Error::InvalidParameter(format!(
                "a mixture needs at least 2 components, got {p}"
            )));
        }
        if weights.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {p} components",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidParameter(format!(
                "weights must sum to 1, got {sum}"
            )));
        }
        let d = components.dim(0);
        for idx in 1..p {
            if components.dim(idx) != d {
                return Err(Error::DimensionMismatch(
                    "components must share one dimension".into(),
                ));
            }
        }
        if let MixtureComponents::Student(comps) = &components {
            let dof = comps[0].dof();
            if comps.iter().any(|c| c.dof() != dof) {
                return Err(Error::InvalidParameter(
                    "all Student components must share one degrees-of-freedom value".into(),
                ));
            }
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn gaussian(weights: Vec<f64>, components: Vec<GaussianComponent>) -> Result<Self> {
        Self::new(weights, MixtureComponents::Gaussian(components))
    }

    pub fn student(weights: Vec<f64>, components: Vec<StudentComponent>) -> Result<Self> {
        Self::new(weights, MixtureComponents::Student(components))
    }

    /// Number of components P.
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Data dimension d.
    pub fn dim(&self) -> usize {
        self.components.dim(0)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &MixtureComponents {
        &self.components
    }
}

/// Sampled observations with their generating class labels (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    points: DMatrix<f64>,
    labels: Vec<usize>,
}

impl LabeledSample {
    pub fn new(points: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if points.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows of points but {} labels",
                points.nrows(),
                labels.len()
            )));
        }
        if labels.contains(&0) {
            return Err(Error::InvalidInput("labels must be in 1..=P".into()));
        }
        Ok(Self { points, labels })
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// An n x P matrix of posterior probabilities; entry (i, p) is the
/// probability that observation i belongs to class p+1. Rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    values: DMatrix<f64>,
}

impl PosteriorMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() < 1 {
            return Err(Error::InvalidInput(
                "posterior matrix needs P >= 1 columns".into(),
            ));
        }
        for i in 0..values.nrows() {
            let mut sum = 0.0;
            for k in 0..values.ncols() {
                let v = values[(i, k)];
                if !(-ROW_SUM_TOL..=1.0 + ROW_SUM_TOL).contains(&v) {
                    return Err(Error::InvalidInput(format!(
                        "posterior entry ({i},{k}) = {v} outside [0,1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!(
                    "posterior row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("empty posterior matrix".into()));
        }
        let p = rows[0].len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch("ragged posterior rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(rows.len(), p, &flat))
    }

    /// Number of observations n.
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Number of classes P.
    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    /// Entry (i, k), zero-based column index (class k+1).
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[(i, k)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// Posterior class probabilities for a single point.
///
/// Densities are accumulated in log space with max subtraction, so far-tail
/// points still produce a valid probability vector.
pub fn posterior(model: &MixtureModel, x: &DVector<f64>) -> Result<Vec<f64>> {
    let density = ModelDensity::new(model)?;
    density.posterior(x)
}

/// Posterior probabilities for every row of `points`.
pub fn posterior_matrix(model: &MixtureModel, points: &DMatrix<f64>) -> Result<PosteriorMatrix> {
    ModelDensity::new(model)?.posterior_matrix(points)
}

/// Stratified sampling: exactly `n_per_class[p]` rows labeled p+1, drawn from
/// component p+1, in class order. Deterministic given the seed.
pub fn sample(model: &MixtureModel, n_per_class: &[usize], seed: u64) -> Result<LabeledSample> {
    let p = model.n_components();
    let d = model.dim();
    if n_per_class.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "n_per_class has {} entries for {p} components",
            n_per_class.len()
        )));
    }
    let n: usize = n_per_class.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);

    match model.components() {
        MixtureComponents::Gaussian(comps) => {
            for (class, comp) in comps.iter().enumerate() {
                let chol = check_spd(comp.covariance(), "covariance")?;
                for _ in 0..n_per_class[class] {
                    let z = standard_normal_vector(d, &mut rng);
                    let x = comp.mean() + chol.l() * z;
                    data.extend(x.iter());
                    labels.push(class + 1);
                }
            }
        }
        MixtureComponents::Student(comps) => {
            for (class, comp) in comps.iter().enumerate() {
                let chol = check_spd(comp.scale(), "scale")?;
                let chi2 = ChiSquared::new(comp.dof())
                    .map_err(|e| Error::InvalidParameter(format!("chi-square dof: {e}")))?;
                for _ in 0..n_per_class[class] {
                    // x = y / sqrt(u / dof) + location, y ~ N(0, scale), u ~ chi2(dof)
                    let z = standard_normal_vector(d, &mut rng);
                    let y = chol.l() * z;
                    let u: f64 = chi2.sample(&mut rng);
                    let x = comp.location() + y / (u / comp.dof()).sqrt();
                    data.extend(x.iter());
                    labels.push(class + 1);
                }
            }
        }
    }
    LabeledSample::new(DMatrix::from_row_slice(n, d, &data), labels)
}

fn standard_normal_vector(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

/// Assignment of fitted components to reference components by minimal total
/// squared distance between centers; entry `p` is the fitted index matched to
/// reference component `p`. Used to undo label switching before evaluation.
pub fn match_components(fitted: &MixtureModel, reference: &MixtureModel) -> Result<Vec<usize>> {
    let p = reference.n_components();
    if fitted.n_components() != p {
        return Err(Error::DimensionMismatch(
            "models have different component counts".into(),
        ));
    }
    if fitted.dim() != reference.dim() {
        return Err(Error::DimensionMismatch(
            "models have different dimensions".into(),
        ));
    }
    if p > 8 {
        return Err(Error::TooLarge(format!(
            "exhaustive matching limited to 8 components, got {p}"
        )));
    }
    let mut cost = vec![0.0; p * p];
    for r in 0..p {
        for f in 0..p {
            cost[r * p + f] =
                (reference.components().center(r) - fitted.components().center(f)).norm_squared();
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(p);
    let mut used = vec![false; p];
    fn recurse(
        r: usize,
        p: usize,
        cost: &[f64],
        current: &mut Vec<usize>,
        used: &mut [bool],
        acc: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if r == p {
            if best.as_ref().is_none_or(|(b, _)| acc < *b) {
                *best = Some((acc, current.clone()));
            }
            return;
        }
        for f in 0..p {
            if !used[f] {
                used[f] = true;
                current.push(f);
                recurse(r + 1, p, cost, current, used, acc + cost[r * p + f], best);
                current.pop();
                used[f] = false;
            }
        }
    }
    recurse(0, p, &cost, &mut current, &mut used, 0.0, &mut best);
    Ok(best.expect("P >= 2 permutations exist").1)
}
