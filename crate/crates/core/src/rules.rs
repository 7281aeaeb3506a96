//! Classification rules over posterior matrices.
//!
//! Every rule here is a restricted MAP rule: on the rows it classifies it
//! assigns the class of interest with the largest posterior, elsewhere it
//! outputs 0 ("not classified"). Rules differ only in which rows they keep:
//! the MAP rule keeps everything, the thresholded rule keeps rows with
//! `tau*_K > 1 - alpha`, and lambda rules keep rows whose criterion value
//! reaches a threshold (see [`criterion`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::PosteriorMatrix;

/// Which type-I-like error rate a rule is calibrated to control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskKind {
    /// Misclassification rate conditional on being classified.
    Mfdr,
    /// Joint probability of classifying and misclassifying.
    Mnpr,
}

impl RiskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskKind::Mfdr => "mfdr",
            RiskKind::Mnpr => "mnpr",
        }
    }
}

/// Risk kind, level and classes of interest; parameterizes every rule.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleSpec {
    risk: RiskKind,
    alpha: f64,
    interest: Vec<usize>,
}

impl RuleSpec {
    /// `interest` holds 1-based class indices; it is sorted and must be
    /// nonempty with distinct entries. `alpha` must lie in (0, 1].
    pub fn new(risk: RiskKind, alpha: f64, interest: Vec<usize>) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be in (0, 1], got {alpha}"
            )));
        }
        let mut interest = interest;
        interest.sort_unstable();
        if interest.is_empty() {
            return Err(Error::InvalidParameter("interest set is empty".into()));
        }
        if interest[0] == 0 {
            return Err(Error::InvalidParameter("class indices are 1-based".into()));
        }
        if interest.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter(
                "interest set has duplicates".into(),
            ));
        }
        Ok(Self {
            risk,
            alpha,
            interest,
        })
    }

    /// All P classes of interest (the by-default setting).
    pub fn all_classes(risk: RiskKind, alpha: f64, p: usize) -> Result<Self> {
        Self::new(risk, alpha, (1..=p).collect())
    }

    pub fn risk(&self) -> RiskKind {
        self.risk
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn interest(&self) -> &[usize] {
        &self.interest
    }

    /// Number of classes of interest K.
    pub fn k(&self) -> usize {
        self.interest.len()
    }

    /// True when the interest set covers all P classes of `posteriors`.
    pub fn covers_all(&self, posteriors: &PosteriorMatrix) -> bool {
        self.interest.len() == posteriors.p()
    }
}

pub(crate) fn validate_interest(interest: &[usize], p: usize) -> Result<()> {
    if interest.is_empty() {
        return Err(Error::InvalidParameter("interest set is empty".into()));
    }
    for w in interest.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidParameter(
                "interest must be sorted and distinct".into(),
            ));
        }
    }
    if interest[0] == 0 || *interest.last().unwrap() > p {
        return Err(Error::InvalidParameter(format!(
            "interest classes must lie in 1..={p}"
        )));
    }
    Ok(())
}

/// Per-row predictions: 0 means "not classified", any other label is one of
/// the classes of interest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionVector {
    labels: Vec<usize>,
}

impl PredictionVector {
    pub fn new(labels: Vec<usize>, interest: &[usize]) -> Result<Self> {
        for &z in &labels {
            if z != 0 && !interest.contains(&z) {
                return Err(Error::InvalidInput(format!(
                    "label {z} outside the interest set"
                )));
            }
        }
        Ok(Self { labels })
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

    pub fn n_classified(&self) -> usize {
        self.labels.iter().filter(|&&z| z > 0).count()
    }

    /// Boolean mask of classified rows.
    pub fn classified_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&z| z > 0).collect()
    }
}

/// `tau*_K`: per row, the maximal posterior among the classes of interest.
pub fn tau_star(posteriors: &PosteriorMatrix, interest: &[usize]) -> Result<Vec<f64>> {
    validate_interest(interest, posteriors.p())?;
    Ok((0..posteriors.n())
        .map(|i| {
            interest
                .iter()
                .map(|&k| posteriors.get(i, k - 1))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Per row, the total posterior mass of the interest classes.
pub(crate) fn interest_mass(posteriors: &PosteriorMatrix, interest: &[usize]) -> Vec<f64> {
    (0..posteriors.n())
        .map(|i| interest.iter().map(|&k| posteriors.get(i, k - 1)).sum())
        .collect()
}

fn map_labels(posteriors: &PosteriorMatrix, interest: &[usize]) -> Vec<usize> {
    (0..posteriors.n())
        .map(|i| {
            let mut best = interest[0];
            let mut best_tau = posteriors.get(i, interest[0] - 1);
            for &k in &interest[1..] {
                let tau = posteriors.get(i, k - 1);
                // Strict comparison: ties keep the smallest class index.
                if tau > best_tau {
                    best = k;
                    best_tau = tau;
                }
            }
            best
        })
        .collect()
}

/// Restricted MAP rule: classifies every row into its best interest class.
pub fn map_rule(posteriors: &PosteriorMatrix, interest: &[usize]) -> Result<PredictionVector> {
    validate_interest(interest, posteriors.p())?;
    Ok(PredictionVector {
        labels: map_labels(posteriors, interest),
    })
}

/// Thresholded rule: restricted MAP label where `tau*_K > 1 - alpha`, else 0.
pub fn thresholded_rule(posteriors: &PosteriorMatrix, spec: &RuleSpec) -> Result<PredictionVector> {
    let ts = tau_star(posteriors, spec.interest())?;
    let mut labels = map_labels(posteriors, spec.interest());
    let cutoff = 1.0 - spec.alpha();
    for (label, t) in labels.iter_mut().zip(&ts) {
        if *t <= cutoff {
            *label = 0;
        }
    }
    Ok(PredictionVector { labels })
}

/// Per-row value of the criterion whose level sets are the optimal
/// classification regions. The form depends on the risk and on whether the
/// interest set covers all classes:
///
/// - MNPR, K < P: `sum_interest tau / (1 - tau*_K)`, `+inf` when `tau*_K = 1`
///   (such a row is always classified first);
/// - MNPR, K = P: `tau*`;
/// - MFDR, K < P: `(tau*_K + alpha - 1) / sum_interest tau`, `-inf` when the
///   interest mass is zero (such a row is never classified);
/// - MFDR, K = P: `tau* + alpha - 1`.
pub fn criterion(posteriors: &PosteriorMatrix, spec: &RuleSpec) -> Result<Vec<f64>> {
    let ts = tau_star(posteriors, spec.interest())?;
    let full = spec.covers_all(posteriors);
    let alpha = spec.alpha();
    let values = match (spec.risk(), full) {
        (RiskKind::Mnpr, true) => ts,
        (RiskKind::Mnpr, false) => {
            let mass = interest_mass(posteriors, spec.interest());
            ts.iter()
                .zip(&mass)
                .map(|(&t, &s)| {
                    if t >= 1.0 {
                        f64::INFINITY
                    } else {
                        s / (1.0 - t)
                    }
                })
                .collect()
        }
        (RiskKind::Mfdr, true) => ts.iter().map(|&t| t + alpha - 1.0).collect(),
        (RiskKind::Mfdr, false) => {
            let mass = interest_mass(posteriors, spec.interest());
            ts.iter()
                .zip(&mass)
                .map(|(&t, &s)| {
                    if s <= 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        (t + alpha - 1.0) / s
                    }
                })
                .collect()
        }
    };
    Ok(values)
}

/// Restricted MAP on the region `criterion >= lambda`.
///
/// The comparison is plain IEEE `>=`: `lambda = -inf` classifies every row,
/// `lambda = +inf` classifies nothing on data with finite criteria (rows at
/// the `+inf` sentinel are kept, matching the rank-based cut that produced
/// such a lambda).
pub fn apply_lambda(
    posteriors: &PosteriorMatrix,
    spec: &RuleSpec,
    lambda: f64,
) -> Result<PredictionVector> {
    if lambda.is_nan() {
        return Err(Error::InvalidParameter("lambda must not be NaN".into()));
    }
    let crit = criterion(posteriors, spec)?;
    let mut labels = map_labels(posteriors, spec.interest());
    for (label, c) in labels.iter_mut().zip(&crit) {
        if *c < lambda {
            *label = 0;
        }
    }
    Ok(PredictionVector { labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn matrix(rows: &[Vec<f64>]) -> PosteriorMatrix {
        PosteriorMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn tau_star_respects_interest() {
        let post = matrix(&[vec![0.2, 0.3, 0.5]]);
        assert_eq!(tau_star(&post, &[1, 2, 3]).unwrap(), vec![0.5]);
        assert_eq!(tau_star(&post, &[1, 3]).unwrap(), vec![0.5]);
        assert_eq!(tau_star(&post, &[1]).unwrap(), vec![0.2]);
    }

    #[test]
    fn map_rule_picks_argmax_with_smallest_index_ties() {
        let post = matrix(&[vec![0.2, 0.3, 0.5], vec![0.4, 0.4, 0.2]]);
        assert_eq!(map_rule(&post, &[1, 2, 3]).unwrap().labels(), &[3, 1]);
        assert_eq!(map_rule(&post, &[1, 2]).unwrap().labels(), &[2, 1]);
        assert_eq!(map_rule(&post, &[2, 3]).unwrap().labels(), &[3, 2]);
    }

    #[test]
    fn thresholded_rule_uses_strict_inequality() {
        let post = matrix(&[vec![0.96, 0.04], vec![0.95, 0.05], vec![0.2, 0.8]]);
        let spec = RuleSpec::all_classes(RiskKind::Mfdr, 0.05, 2).unwrap();
        let preds = thresholded_rule(&post, &spec).unwrap();
        // 0.96 > 0.95 classifies; 0.95 does not (strict).
        assert_eq!(preds.labels(), &[1, 0, 0]);

        let lax = RuleSpec::all_classes(RiskKind::Mfdr, 1.0, 2).unwrap();
        let preds = thresholded_rule(&post, &lax).unwrap();
        assert_eq!(preds.n_classified(), 3);
    }

    #[test]
    fn criterion_worked_values() {
        // MFDR K=P: tau* + alpha - 1.
        let post = matrix(&[vec![0.95, 0.05]]);
        let spec = RuleSpec::all_classes(RiskKind::Mfdr, 0.05, 2).unwrap();
        assert_relative_eq!(criterion(&post, &spec).unwrap()[0], 0.0, epsilon = 1e-15);

        // Hand arithmetic on row (0.3, 0.3, 0.4), interest {1,2}.
        let post = matrix(&[vec![0.3, 0.3, 0.4]]);
        let mnpr = RuleSpec::new(RiskKind::Mnpr, 0.05, vec![1, 2]).unwrap();
        assert_relative_eq!(
            criterion(&post, &mnpr).unwrap()[0],
            0.6 / 0.7,
            max_relative = 1e-12
        );
        let mfdr = RuleSpec::new(RiskKind::Mfdr, 0.1, vec![1, 2]).unwrap();
        assert_relative_eq!(
            criterion(&post, &mfdr).unwrap()[0],
            (0.3 + 0.1 - 1.0) / 0.6,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            criterion(&post, &mfdr).unwrap()[0],
            -1.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn criterion_sentinels() {
        let post = matrix(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let mnpr = RuleSpec::new(RiskKind::Mnpr, 0.05, vec![1, 2]).unwrap();
        let crit = criterion(&post, &mnpr).unwrap();
        assert_eq!(crit[0], f64::INFINITY);
        let mfdr = RuleSpec::new(RiskKind::Mfdr, 0.05, vec![1, 2]).unwrap();
        let crit = criterion(&post, &mfdr).unwrap();
        assert_eq!(crit[1], f64::NEG_INFINITY);
    }

    #[test]
    fn apply_lambda_extremes() {
        let post = matrix(&[
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.34, 0.33, 0.33],
        ]);
        let spec = RuleSpec::all_classes(RiskKind::Mfdr, 0.05, 3).unwrap();
        let everything = apply_lambda(&post, &spec, f64::NEG_INFINITY).unwrap();
        assert_eq!(everything, map_rule(&post, &[1, 2, 3]).unwrap());
        let nothing = apply_lambda(&post, &spec, f64::INFINITY).unwrap();
        assert_eq!(nothing.labels(), &[0, 0, 0]);
    }

    #[test]
    fn apply_lambda_zero_includes_boundary_row() {
        // At lambda = 0 the row with tau* = 1 - alpha exactly is classified,
        // while the strict thresholded rule drops it.
        let post = matrix(&[vec![0.95, 0.05], vec![0.97, 0.03], vec![0.5, 0.5]]);
        let spec = RuleSpec::all_classes(RiskKind::Mfdr, 0.05, 2).unwrap();
        let with_boundary = apply_lambda(&post, &spec, 0.0).unwrap();
        assert_eq!(with_boundary.labels(), &[1, 1, 0]);
        let strict = thresholded_rule(&post, &spec).unwrap();
        assert_eq!(strict.labels(), &[0, 1, 0]);
    }

    #[test]
    fn lambda_classified_sets_are_nested() {
        let post = matrix(&[
            vec![0.9, 0.05, 0.05],
            vec![0.3, 0.4, 0.3],
            vec![0.5, 0.25, 0.25],
            vec![0.05, 0.05, 0.9],
        ]);
        for spec in [
            RuleSpec::all_classes(RiskKind::Mfdr, 0.1, 3).unwrap(),
            RuleSpec::new(RiskKind::Mnpr, 0.1, vec![1, 3]).unwrap(),
        ] {
            let lambdas = [f64::NEG_INFINITY, -1.0, -0.2, 0.0, 0.3, 1.0, f64::INFINITY];
            for pair in lambdas.windows(2) {
                let low = apply_lambda(&post, &spec, pair[0]).unwrap();
                let high = apply_lambda(&post, &spec, pair[1]).unwrap();
                for i in 0..post.n() {
                    if high.labels()[i] > 0 {
                        assert_eq!(high.labels()[i], low.labels()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn mnpr_full_criterion_ranks_like_tau_star() {
        // With all classes of interest the MNPR criterion is tau* itself.
        let post = matrix(&[
            vec![0.2, 0.3, 0.5],
            vec![0.6, 0.2, 0.2],
            vec![0.1, 0.1, 0.8],
            vec![0.34, 0.33, 0.33],
        ]);
        let spec = RuleSpec::all_classes(RiskKind::Mnpr, 0.2, 3).unwrap();
        let crit = criterion(&post, &spec).unwrap();
        let ts = tau_star(&post, &[1, 2, 3]).unwrap();
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
            idx
        };
        assert_eq!(rank(&crit), rank(&ts));
    }
}
