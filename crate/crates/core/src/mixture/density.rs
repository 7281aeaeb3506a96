//! Prepared density evaluators.
//!
//! Each component's Cholesky factor and log normalizing constant are computed
//! once, so batch posterior evaluation only pays a triangular solve per point.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use super::{
    check_spd, GaussianComponent, MixtureComponents, MixtureModel, PosteriorMatrix,
    StudentComponent,
};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

enum Kind {
    Gaussian,
    Student { dof: f64 },
}

pub(crate) struct PreparedComponent {
    center: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
    kind: Kind,
}

impl PreparedComponent {
    pub(crate) fn gaussian(c: &GaussianComponent) -> Result<Self> {
        let chol = check_spd(c.covariance(), "covariance")?;
        let l = chol.l();
        let half_log_det: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
        let d = c.dim() as f64;
        Ok(Self {
            center: c.mean().clone(),
            log_norm: -0.5 * d * LN_2PI - half_log_det,
            chol_l: l,
            kind: Kind::Gaussian,
        })
    }

    pub(crate) fn student(c: &StudentComponent) -> Result<Self> {
        let chol = check_spd(c.scale(), "scale")?;
        let l = chol.l();
        let half_log_det: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
        let d = c.dim() as f64;
        let dof = c.dof();
        let log_norm = ln_gamma(0.5 * (dof + d))
            - ln_gamma(0.5 * dof)
            - 0.5 * d * (dof * std::f64::consts::PI).ln()
            - half_log_det;
        Ok(Self {
            center: c.location().clone(),
            log_norm,
            chol_l: l,
            kind: Kind::Student { dof },
        })
    }

    /// Log pdf at `x`; `x` must have the component's dimension.
    pub(crate) fn log_density(&self, x: &DVector<f64>) -> f64 {
        let mut z = x - &self.center;
        // L is nonsingular by construction, the solve cannot fail.
        self.chol_l.solve_lower_triangular_mut(&mut z);
        let quad = z.norm_squared();
        match self.kind {
            Kind::Gaussian => self.log_norm - 0.5 * quad,
            Kind::Student { dof } => {
                let d = self.center.len() as f64;
                self.log_norm - 0.5 * (dof + d) * (quad / dof).ln_1p()
            }
        }
    }

    fn dim(&self) -> usize {
        self.center.len()
    }
}

/// Reusable evaluator for one mixture model.
pub struct ModelDensity {
    prepared: Vec<PreparedComponent>,
    log_weights: Vec<f64>,
}

impl ModelDensity {
    pub fn new(model: &MixtureModel) -> Result<Self> {
        let prepared = match model.components() {
            MixtureComponents::Gaussian(comps) => comps
                .iter()
                .map(PreparedComponent::gaussian)
                .collect::<Result<Vec<_>>>()?,
            MixtureComponents::Student(comps) => comps
                .iter()
                .map(PreparedComponent::student)
                .collect::<Result<Vec<_>>>()?,
        };
        let log_weights = model.weights().iter().map(|w| w.ln()).collect();
        Ok(Self {
            prepared,
            log_weights,
        })
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        let d = self.prepared[0].dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "point has length {}, model dimension is {d}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "point has non-finite coordinates".into(),
            ));
        }
        Ok(())
    }

    /// Mixture log density at `x`.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_point(x)?;
        let logs: Vec<f64> = self.joint_logs(x);
        Ok(log_sum_exp(&logs))
    }

    /// Posterior class probabilities at `x`, computed in log space with the
    /// max-subtraction trick.
    pub fn posterior(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut logs = self.joint_logs(x);
        normalize_in_place(&mut logs);
        Ok(logs)
    }

    /// Posterior probabilities for every row of `points`.
    pub fn posterior_matrix(&self, points: &DMatrix<f64>) -> Result<PosteriorMatrix> {
        let n = points.nrows();
        let p = self.prepared.len();
        let mut values = DMatrix::zeros(n, p);
        for i in 0..n {
            let x = points.row(i).transpose();
            self.check_point(&x)?;
            let mut logs = self.joint_logs(&x);
            normalize_in_place(&mut logs);
            for k in 0..p {
                values[(i, k)] = logs[k];
            }
        }
        PosteriorMatrix::new(values)
    }

    fn joint_logs(&self, x: &DVector<f64>) -> Vec<f64> {
        self.prepared
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_density(x))
            .collect()
    }
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Turns joint log masses into normalized probabilities, in place.
fn normalize_in_place(logs: &mut [f64]) {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logs.iter_mut() {
        *l = (*l - m).exp();
        sum += *l;
    }
    for l in logs.iter_mut() {
        *l /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn standard_normal_at_mode() {
        let c = GaussianComponent::isotropic(dvector![0.0, 0.0], 1.0).unwrap();
        let v = c.density(&dvector![0.0, 0.0]).unwrap();
        assert_relative_eq!(v, 1.0 / (2.0 * std::f64::consts::PI), max_relative = 1e-12);
    }

    #[test]
    fn half_variance_gaussian_at_mode() {
        let c = GaussianComponent::isotropic(dvector![-1.0, 0.0], 0.5).unwrap();
        let v = c.density(&dvector![-1.0, 0.0]).unwrap();
        assert_relative_eq!(v, 1.0 / std::f64::consts::PI, max_relative = 1e-12);
    }

    #[test]
    fn gaussian_matches_direct_isotropic_formula() {
        // Independent route: exp(-||x-mu||^2 / (2 s2)) / (2 pi s2)^(d/2).
        let c = GaussianComponent::isotropic(dvector![0.5, -2.0], 0.7).unwrap();
        let x = dvector![1.3, -1.1];
        let r2 = (&x - c.mean()).norm_squared();
        let expect = (-r2 / (2.0 * 0.7)).exp() / (2.0 * std::f64::consts::PI * 0.7);
        assert_relative_eq!(c.density(&x).unwrap(), expect, max_relative = 1e-12);
    }

    #[test]
    fn student_mode_matches_closed_form_constant() {
        // d = 2, dof = 5, scale = I: Gamma(3.5)/Gamma(2.5) = 2.5, so the pdf at
        // the location is 2.5 / (5 pi) = 1 / (2 pi).
        let c =
            StudentComponent::new(dvector![0.0, 0.0], dmatrix![1.0, 0.0; 0.0, 1.0], 5.0).unwrap();
        let v = c.density(&dvector![0.0, 0.0]).unwrap();
        assert_relative_eq!(v, 0.5 / std::f64::consts::PI, epsilon = 1e-10);
    }

    #[test]
    fn student_density_integrates_to_one() {
        // Quadrature oracle on a wide grid; heavy tails need the margin.
        let c =
            StudentComponent::new(dvector![0.0, 0.0], dmatrix![1.0, 0.0; 0.0, 1.0], 5.0).unwrap();
        let (lo, hi, steps) = (-60.0, 60.0, 1200usize);
        let h = (hi - lo) / steps as f64;
        let mut total = 0.0;
        for i in 0..steps {
            for j in 0..steps {
                let x = dvector![lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += c.density(&x).unwrap() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn benchmark_model_posterior_is_confident_at_far_mode() {
        // Three isotropic components at (-1,0), (0,3), (1,0), sigma2 = 0.5;
        // expected value cross-checked with the direct isotropic formula.
        let model = MixtureModel::gaussian(
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            vec![
                GaussianComponent::isotropic(dvector![-1.0, 0.0], 0.5).unwrap(),
                GaussianComponent::isotropic(dvector![0.0, 3.0], 0.5).unwrap(),
                GaussianComponent::isotropic(dvector![1.0, 0.0], 0.5).unwrap(),
            ],
        )
        .unwrap();
        let x = dvector![0.0, 3.0];
        let tau = super::super::posterior(&model, &x).unwrap();
        assert!(tau[1] > 0.99, "tau_2 = {}", tau[1]);

        let direct = |mu: DVector<f64>| (-(&x - mu).norm_squared() / 1.0).exp();
        let f = [
            direct(dvector![-1.0, 0.0]),
            direct(dvector![0.0, 3.0]),
            direct(dvector![1.0, 0.0]),
        ];
        let expect = f[1] / (f[0] + f[1] + f[2]);
        assert_relative_eq!(tau[1], expect, max_relative = 1e-9);
    }

    #[test]
    fn argmax_invariant_under_constant_log_shift() {
        // Scaling every density by a constant must not move the argmax.
        let model = MixtureModel::gaussian(
            vec![0.2, 0.5, 0.3],
            vec![
                GaussianComponent::isotropic(dvector![-1.0, 0.0], 0.8).unwrap(),
                GaussianComponent::isotropic(dvector![0.0, 2.0], 0.8).unwrap(),
                GaussianComponent::isotropic(dvector![1.0, 0.0], 0.8).unwrap(),
            ],
        )
        .unwrap();
        let density = ModelDensity::new(&model).unwrap();
        for x in [dvector![0.3, 0.4], dvector![-2.0, 0.0], dvector![0.0, 5.0]] {
            let mut logs = density.joint_logs(&x);
            let tau = density.posterior(&x).unwrap();
            let argmax_tau = tau
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            for l in logs.iter_mut() {
                *l += 123.456;
            }
            let argmax_shifted = logs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax_tau, argmax_shifted);
        }
    }
}
