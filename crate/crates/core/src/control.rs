//! Plug-in risk estimators and calibration of the optimal rule.
//!
//! `estimate_lambda` ranks observations by their criterion value and keeps
//! the longest prefix whose plug-in risk stays at or below alpha; the
//! criterion value at the cut becomes the threshold for classifying new
//! data. `brute_force_region` searches all 2^n regions and serves as the
//! ground-truth oracle in tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::PosteriorMatrix;
use crate::rules::{
    criterion, interest_mass, map_rule, tau_star, validate_interest, PredictionVector, RiskKind,
    RuleSpec,
};

/// Calibration output: the threshold, how many calibration rows it keeps,
/// and the plug-in risk actually achieved there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaEstimate {
    /// Criterion value at the cut; `+inf` when no prefix is feasible.
    #[serde(with = "float_with_infinities")]
    pub lambda_hat: f64,
    /// Number of classified calibration rows.
    pub cut_index: usize,
    /// Plug-in risk of the classified prefix (0 when empty).
    pub achieved_risk: f64,
    /// For MFDR with all classes of interest: the threshold on the tau* scale
    /// (`lambda_hat + 1 - alpha`), the scale the thresholded rule lives on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_scale_threshold: Option<f64>,
}

/// JSON has no Infinity literal; infinite values round-trip as strings.
mod float_with_infinities {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!(
                    "bad float value {other:?}"
                ))),
            },
        }
    }
}

fn check_mask(posteriors: &PosteriorMatrix, mask: &[bool]) -> Result<()> {
    if mask.len() != posteriors.n() {
        return Err(Error::DimensionMismatch(format!(
            "mask has length {}, posterior matrix has {} rows",
            mask.len(),
            posteriors.n()
        )));
    }
    Ok(())
}

/// Plug-in MNPR of the region `mask`: `(1/n) sum_{i in mask} (1 - tau*_K)`.
pub fn plug_in_mnpr(
    posteriors: &PosteriorMatrix,
    interest: &[usize],
    mask: &[bool],
) -> Result<f64> {
    check_mask(posteriors, mask)?;
    let ts = tau_star(posteriors, interest)?;
    let total: f64 = ts
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&t, _)| 1.0 - t)
        .sum();
    Ok(total / posteriors.n() as f64)
}

/// Plug-in MFDR of the region `mask`: the mean of `1 - tau*_K` over the
/// masked rows, 0 by convention when the mask is empty.
pub fn plug_in_mfdr(
    posteriors: &PosteriorMatrix,
    interest: &[usize],
    mask: &[bool],
) -> Result<f64> {
    check_mask(posteriors, mask)?;
    let ts = tau_star(posteriors, interest)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (&t, &m) in ts.iter().zip(mask) {
        if m {
            total += 1.0 - t;
            count += 1;
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// Plug-in MFNR of the region `mask`:
/// `(1/n) sum_{i not in mask} sum_{k in interest} tau_k`.
pub fn plug_in_mfnr(
    posteriors: &PosteriorMatrix,
    interest: &[usize],
    mask: &[bool],
) -> Result<f64> {
    check_mask(posteriors, mask)?;
    validate_interest(interest, posteriors.p())?;
    let mass = interest_mass(posteriors, interest);
    let total: f64 = mass
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&s, _)| s)
        .sum();
    Ok(total / posteriors.n() as f64)
}

/// Rows in criterion-descending order (stable: ties keep input order) and
/// the lambda estimate for that ranking.
fn ranked_estimate(
    posteriors: &PosteriorMatrix,
    spec: &RuleSpec,
) -> Result<(LambdaEstimate, Vec<usize>)> {
    let n = posteriors.n();
    if n == 0 {
        return Err(Error::InvalidInput("need at least one observation".into()));
    }
    let crit = criterion(posteriors, spec)?;
    let ts = tau_star(posteriors, spec.interest())?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| crit[j].total_cmp(&crit[i]));

    // Largest feasible prefix. The full scan matters: for MFDR with K < P the
    // running mean is not monotone, so stopping at the first failure would be
    // wrong.
    let mut cum = 0.0;
    let mut best: Option<(usize, f64)> = None;
    for (pos, &i) in order.iter().enumerate() {
        cum += 1.0 - ts[i];
        let denom = match spec.risk() {
            RiskKind::Mfdr => (pos + 1) as f64,
            RiskKind::Mnpr => n as f64,
        };
        let risk = cum / denom;
        if risk <= spec.alpha() {
            best = Some((pos + 1, risk));
        }
    }

    let estimate = match best {
        Some((cut, achieved)) => {
            let lambda_hat = crit[order[cut - 1]];
            let tau_scale_threshold = (spec.risk() == RiskKind::Mfdr
                && spec.covers_all(posteriors))
            .then(|| lambda_hat + 1.0 - spec.alpha());
            LambdaEstimate {
                lambda_hat,
                cut_index: cut,
                achieved_risk: achieved,
                tau_scale_threshold,
            }
        }
        None => LambdaEstimate {
            lambda_hat: f64::INFINITY,
            cut_index: 0,
            achieved_risk: 0.0,
            tau_scale_threshold: None,
        },
    };
    Ok((estimate, order))
}

/// Estimates the classification threshold lambda for `spec` on a calibration
/// sample: rows are sorted by decreasing criterion and the largest prefix
/// with plug-in risk at most alpha is kept.
pub fn estimate_lambda(posteriors: &PosteriorMatrix, spec: &RuleSpec) -> Result<LambdaEstimate> {
    ranked_estimate(posteriors, spec).map(|(est, _)| est)
}

/// The estimated optimal rule on the calibration sample: classifies exactly
/// the `cut_index` top-ranked rows. The rank-based cut (rather than
/// re-thresholding at lambda) keeps the plug-in constraint intact under tied
/// criterion values; `lambda_hat` is reported for classifying new data with
/// [`crate::rules::apply_lambda`].
pub fn optimal_rule(
    posteriors: &PosteriorMatrix,
    spec: &RuleSpec,
) -> Result<(PredictionVector, LambdaEstimate)> {
    let (estimate, order) = ranked_estimate(posteriors, spec)?;
    let map = map_rule(posteriors, spec.interest())?;
    let mut labels = vec![0usize; posteriors.n()];
    for &i in order.iter().take(estimate.cut_index) {
        labels[i] = map.labels()[i];
    }
    Ok((PredictionVector::new(labels, spec.interest())?, estimate))
}

/// Exhaustive-search oracle: among all 2^n regions whose plug-in risk is at
/// most alpha, returns the one minimizing plug-in MFNR. Ties prefer more
/// classified rows, then the lexicographically smallest mask. Refuses n > 15.
pub fn brute_force_region(posteriors: &PosteriorMatrix, spec: &RuleSpec) -> Result<Vec<bool>> {
    let n = posteriors.n();
    if n > 15 {
        return Err(Error::TooLarge(format!(
            "2^n search limited to n <= 15, got {n}"
        )));
    }
    validate_interest(spec.interest(), posteriors.p())?;
    let ts = tau_star(posteriors, spec.interest())?;
    let mass = interest_mass(posteriors, spec.interest());
    let total_mass: f64 = mass.iter().sum();

    let mut best_mask = vec![false; n];
    let mut best_mfnr = total_mass / (n.max(1)) as f64;
    let mut best_count = 0usize;
    for bits in 1u32..(1u32 << n) {
        let mut risk_sum = 0.0;
        let mut kept_mass = 0.0;
        let mut count = 0usize;
        for (i, (&t, &s)) in ts.iter().zip(&mass).enumerate() {
            if bits & (1 << i) != 0 {
                risk_sum += 1.0 - t;
                kept_mass += s;
                count += 1;
            }
        }
        let risk = match spec.risk() {
            RiskKind::Mfdr => risk_sum / count as f64,
            RiskKind::Mnpr => risk_sum / n as f64,
        };
        if risk > spec.alpha() {
            continue;
        }
        let mfnr = (total_mass - kept_mass) / n as f64;
        let better = mfnr < best_mfnr
            || (mfnr == best_mfnr
                && (count > best_count || (count == best_count && lex_less(bits, &best_mask))));
        if better {
            best_mfnr = mfnr;
            best_count = count;
            for (i, slot) in best_mask.iter_mut().enumerate() {
                *slot = bits & (1 << i) != 0;
            }
        }
    }
    Ok(best_mask)
}

/// Lexicographic comparison of a candidate bit mask against the incumbent,
/// reading rows first to last with `false < true`.
fn lex_less(bits: u32, incumbent: &[bool]) -> bool {
    for (i, &b) in incumbent.iter().enumerate() {
        let a = bits & (1 << i) != 0;
        if a != b {
            return !a;
        }
    }
    false
}
