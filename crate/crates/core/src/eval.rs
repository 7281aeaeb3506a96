//! Realized (label-based) error rates and replicate aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::{validate_interest, PredictionVector};

/// Realized error rates of one rule on one labeled dataset.
///
/// `realized_mfdr` is 0 by convention when nothing is classified; check
/// [`EvalReport::none_classified`] to tell that case apart from a perfect
/// classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub realized_mfdr: f64,
    pub realized_mnpr: f64,
    pub realized_mfnr: f64,
    pub n_classified: usize,
    pub n_total: usize,
    /// Count of true labels in the interest set.
    pub n_interest: usize,
}

impl EvalReport {
    pub fn none_classified(&self) -> bool {
        self.n_classified == 0
    }
}

/// Compares predictions with true labels:
/// - realized MFDR: misclassified / classified (0 when none classified),
/// - realized MNPR: misclassified / n,
/// - realized MFNR: (true label of interest and not classified) / n.
pub fn evaluate(
    predictions: &PredictionVector,
    true_labels: &[usize],
    interest: &[usize],
) -> Result<EvalReport> {
    if predictions.len() != true_labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            true_labels.len()
        )));
    }
    if true_labels.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let mut sorted = interest.to_vec();
    sorted.sort_unstable();
    validate_interest(&sorted, usize::MAX)?;
    if true_labels.contains(&0) {
        return Err(Error::InvalidInput("true labels must be in 1..=P".into()));
    }
    for &z in predictions.labels() {
        if z != 0 && sorted.binary_search(&z).is_err() {
            return Err(Error::InvalidInput(format!(
                "prediction label {z} outside the interest set"
            )));
        }
    }

    let n = true_labels.len();
    let mut wrong = 0usize;
    let mut classified = 0usize;
    let mut missed = 0usize;
    let mut n_interest = 0usize;
    for (&pred, &truth) in predictions.labels().iter().zip(true_labels) {
        let of_interest = sorted.binary_search(&truth).is_ok();
        n_interest += of_interest as usize;
        if pred > 0 {
            classified += 1;
            wrong += (pred != truth) as usize;
        } else {
            missed += of_interest as usize;
        }
    }
    Ok(EvalReport {
        realized_mfdr: if classified == 0 {
            0.0
        } else {
            wrong as f64 / classified as f64
        },
        realized_mnpr: wrong as f64 / n as f64,
        realized_mfnr: missed as f64 / n as f64,
        n_classified: classified,
        n_total: n,
        n_interest,
    })
}

/// Mean, n-1 standard deviation and quartiles of one scalar across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Descriptive statistics of a nonempty slice; a single value gets sd = 0.
pub fn summary_stats(values: &[f64]) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::InvalidInput(
            "cannot summarize an empty slice".into(),
        ));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n == 1 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(SummaryStats {
        mean,
        sd,
        median: quantile(&sorted, 0.5),
        q25: quantile(&sorted, 0.25),
        q75: quantile(&sorted, 0.75),
    })
}

/// Linear-interpolation quantile (R type 7) of an already sorted slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Aggregated error rates across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_reports: usize,
    pub mfdr: SummaryStats,
    pub mnpr: SummaryStats,
    pub mfnr: SummaryStats,
    pub mean_n_classified: f64,
}

/// Summarizes a nonempty list of evaluation reports.
pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to aggregate".into()));
    }
    let collect = |f: fn(&EvalReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    Ok(AggregateReport {
        n_reports: reports.len(),
        mfdr: summary_stats(&collect(|r| r.realized_mfdr))?,
        mnpr: summary_stats(&collect(|r| r.realized_mnpr))?,
        mfnr: summary_stats(&collect(|r| r.realized_mfnr))?,
        mean_n_classified: reports.iter().map(|r| r.n_classified as f64).sum::<f64>()
            / reports.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn preds(labels: Vec<usize>, interest: &[usize]) -> PredictionVector {
        PredictionVector::new(labels, interest).unwrap()
    }

    #[test]
    fn perfect_classification() {
        let p = preds(vec![1, 2, 3], &[1, 2, 3]);
        let r = evaluate(&p, &[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!(
            (r.realized_mfdr, r.realized_mnpr, r.realized_mfnr),
            (0.0, 0.0, 0.0)
        );
        assert_eq!(r.n_classified, 3);
        assert!(!r.none_classified());
    }

    #[test]
    fn nothing_classified_everything_of_interest() {
        let p = preds(vec![0, 0], &[1, 2]);
        let r = evaluate(&p, &[1, 2], &[1, 2]).unwrap();
        assert_eq!(r.realized_mfdr, 0.0);
        assert_eq!(r.realized_mnpr, 0.0);
        assert_eq!(r.realized_mfnr, 1.0);
        assert!(r.none_classified());
    }

    #[test]
    fn counting_example() {
        // 4 rows, 3 classified of which 1 wrong, 1 abstention of interest.
        let p = preds(vec![1, 2, 1, 0], &[1, 2]);
        let r = evaluate(&p, &[1, 2, 2, 1], &[1, 2]).unwrap();
        assert_relative_eq!(r.realized_mfdr, 1.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(r.realized_mnpr, 0.25, max_relative = 1e-15);
        assert_relative_eq!(r.realized_mfnr, 0.25, max_relative = 1e-15);
        assert_eq!(r.n_interest, 4);
    }

    #[test]
    fn interest_subset_ignores_other_abstentions() {
        let p = preds(vec![1, 0, 0], &[1, 3]);
        let r = evaluate(&p, &[1, 2, 3], &[1, 3]).unwrap();
        // Row 2 is not of interest, so only row 3 counts as a false negative.
        assert_relative_eq!(r.realized_mfnr, 1.0 / 3.0, max_relative = 1e-15);
        assert_eq!(r.n_interest, 2);
    }

    #[test]
    fn rejects_labels_outside_interest() {
        let p = PredictionVector::new(vec![2, 0], &[1, 2]).unwrap();
        assert!(evaluate(&p, &[1, 1], &[1]).is_err());
    }

    #[test]
    fn mnpr_is_mfdr_scaled_by_coverage() {
        let p = preds(vec![1, 2, 0, 1, 0], &[1, 2]);
        let r = evaluate(&p, &[2, 2, 1, 1, 2], &[1, 2]).unwrap();
        let scaled = r.realized_mfdr * r.n_classified as f64 / r.n_total as f64;
        assert!((r.realized_mnpr - scaled).abs() <= 1e-15);
    }

    #[test]
    fn evaluate_is_permutation_equivariant() {
        let labels = vec![1, 2, 0, 1, 0, 2];
        let truth = vec![2, 2, 1, 1, 2, 2];
        let perm = [3, 0, 5, 1, 4, 2];
        let p1 = preds(labels.clone(), &[1, 2]);
        let r1 = evaluate(&p1, &truth, &[1, 2]).unwrap();
        let p2 = preds(perm.iter().map(|&i| labels[i]).collect(), &[1, 2]);
        let t2: Vec<usize> = perm.iter().map(|&i| truth[i]).collect();
        let r2 = evaluate(&p2, &t2, &[1, 2]).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn aggregate_two_reports() {
        let a = EvalReport {
            realized_mfdr: 0.04,
            realized_mnpr: 0.02,
            realized_mfnr: 0.1,
            n_classified: 10,
            n_total: 20,
            n_interest: 20,
        };
        let b = EvalReport {
            realized_mfdr: 0.06,
            realized_mnpr: 0.04,
            realized_mfnr: 0.2,
            n_classified: 12,
            n_total: 20,
            n_interest: 20,
        };
        let agg = aggregate(&[a, b]).unwrap();
        assert_relative_eq!(agg.mfdr.mean, 0.05, max_relative = 1e-12);
        assert_relative_eq!(agg.mfdr.sd, 0.01414213562373095, max_relative = 1e-10);
        assert_relative_eq!(agg.mean_n_classified, 11.0, max_relative = 1e-12);
    }

    #[test]
    fn aggregate_single_and_identical_reports() {
        let r = EvalReport {
            realized_mfdr: 0.03,
            realized_mnpr: 0.01,
            realized_mfnr: 0.2,
            n_classified: 5,
            n_total: 10,
            n_interest: 10,
        };
        let single = aggregate(std::slice::from_ref(&r)).unwrap();
        assert_eq!(single.n_reports, 1);
        assert_eq!(single.mfdr.mean, 0.03);
        assert_eq!(single.mfdr.sd, 0.0);

        let hundred = vec![r; 100];
        let agg = aggregate(&hundred).unwrap();
        for (s, common) in [(agg.mfdr, 0.03), (agg.mnpr, 0.01), (agg.mfnr, 0.2)] {
            assert_eq!(s.median, common);
            assert_eq!(s.q25, common);
            assert_eq!(s.q75, common);
            assert_relative_eq!(s.mean, common, max_relative = 1e-12);
        }
    }

    #[test]
    fn aggregate_empty_errors() {
        assert!(aggregate(&[]).is_err());
    }
}
