//! Property tests for the rule, control and evaluation invariants.

use proptest::prelude::*;

use mixctl_core::control::{optimal_rule, plug_in_mfdr, plug_in_mfnr};
use mixctl_core::eval::evaluate;
use mixctl_core::mixture::{posterior, GaussianComponent, MixtureModel, PosteriorMatrix};
use mixctl_core::rules::{
    apply_lambda, criterion, map_rule, tau_star, thresholded_rule, PredictionVector, RiskKind,
    RuleSpec,
};
use nalgebra::{DMatrix, DVector};

fn posterior_rows(n: usize, p: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(1e-3..1.0f64, p), 1..=n).prop_map(|rows| {
        rows.into_iter()
            .map(|mut row| {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                row
            })
            .collect()
    })
}

fn gaussian_model() -> impl Strategy<Value = MixtureModel> {
    let comp = (
        prop::collection::vec(-5.0..5.0f64, 2),
        0.3..2.0f64,
        -0.9..0.9f64,
        0.3..2.0f64,
    );
    (prop::collection::vec(comp, 2..=4),).prop_map(|(specs,)| {
        let p = specs.len();
        let comps = specs
            .into_iter()
            .map(|(mean, l00, l10, l11)| {
                // Sigma = L L^T with positive diagonal: positive definite.
                let l = DMatrix::from_row_slice(2, 2, &[l00, 0.0, l10, l11]);
                let cov = &l * l.transpose();
                GaussianComponent::new(DVector::from_vec(mean), cov).unwrap()
            })
            .collect();
        MixtureModel::gaussian(vec![1.0 / p as f64; p], comps).unwrap()
    })
}

proptest! {
    #[test]
    fn posterior_rows_sum_to_one(
        model in gaussian_model(),
        coords in prop::collection::vec(-10.0..10.0f64, 2),
    ) {
        let tau = posterior(&model, &DVector::from_vec(coords)).unwrap();
        let sum: f64 = tau.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9, "row sums to {sum}");
        prop_assert!(tau.iter().all(|t| (0.0..=1.0).contains(t)));
    }

    #[test]
    fn lambda_classified_sets_are_nested(
        rows in posterior_rows(25, 3),
        risk_mfdr in any::<bool>(),
        subset in any::<bool>(),
        alpha in 0.01..1.0f64,
        lambda1 in -3.0..3.0f64,
        gap in 0.0..3.0f64,
    ) {
        let post = PosteriorMatrix::from_rows(&rows).unwrap();
        let risk = if risk_mfdr { RiskKind::Mfdr } else { RiskKind::Mnpr };
        let interest = if subset { vec![1, 3] } else { vec![1, 2, 3] };
        let spec = RuleSpec::new(risk, alpha, interest).unwrap();
        let low = apply_lambda(&post, &spec, lambda1).unwrap();
        let high = apply_lambda(&post, &spec, lambda1 + gap).unwrap();
        for i in 0..post.n() {
            if high.labels()[i] > 0 {
                prop_assert_eq!(high.labels()[i], low.labels()[i]);
            }
        }
    }

    #[test]
    fn all_rules_agree_with_map_on_classified_rows(
        rows in posterior_rows(25, 3),
        alpha in 0.01..1.0f64,
        subset in any::<bool>(),
    ) {
        let post = PosteriorMatrix::from_rows(&rows).unwrap();
        let interest = if subset { vec![2, 3] } else { vec![1, 2, 3] };
        let spec = RuleSpec::new(RiskKind::Mfdr, alpha, interest.clone()).unwrap();
        let map = map_rule(&post, &interest).unwrap();
        let (opt, _) = optimal_rule(&post, &spec).unwrap();
        let thr = thresholded_rule(&post, &spec).unwrap();
        for preds in [&opt, &thr] {
            for i in 0..post.n() {
                if preds.labels()[i] > 0 {
                    prop_assert_eq!(preds.labels()[i], map.labels()[i]);
                }
            }
        }
    }

    #[test]
    fn full_interest_mnpr_criterion_ranks_like_tau_star(rows in posterior_rows(25, 3)) {
        // With every class of interest the K < P formula collapses to
        // 1 / (1 - tau*), a strictly increasing transform of tau*.
        let post = PosteriorMatrix::from_rows(&rows).unwrap();
        let spec = RuleSpec::all_classes(RiskKind::Mnpr, 0.1, 3).unwrap();
        let crit = criterion(&post, &spec).unwrap();
        let ts = tau_star(&post, &[1, 2, 3]).unwrap();
        let transformed: Vec<f64> = ts
            .iter()
            .map(|&t| if t >= 1.0 { f64::INFINITY } else { 1.0 / (1.0 - t) })
            .collect();
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
            idx
        };
        prop_assert_eq!(rank(&crit), rank(&transformed));
    }

    #[test]
    fn thresholded_set_inside_lambda_zero_set(
        rows in posterior_rows(25, 4),
        alpha in 0.01..0.99f64,
    ) {
        let post = PosteriorMatrix::from_rows(&rows).unwrap();
        let spec = RuleSpec::all_classes(RiskKind::Mfdr, alpha, 4).unwrap();
        let thr = thresholded_rule(&post, &spec).unwrap();
        let relaxed = apply_lambda(&post, &spec, 0.0).unwrap();
        for i in 0..post.n() {
            if thr.labels()[i] > 0 {
                prop_assert_eq!(thr.labels()[i], relaxed.labels()[i]);
            }
        }
    }

    #[test]
    fn thresholded_plug_in_mfdr_stays_under_alpha(
        rows in posterior_rows(40, 3),
        alpha in 0.01..0.99f64,
    ) {
        let post = PosteriorMatrix::from_rows(&rows).unwrap();
        let spec = RuleSpec::all_classes(RiskKind::Mfdr, alpha, 3).unwrap();
        let thr = thresholded_rule(&post, &spec).unwrap();
        if thr.n_classified() > 0 {
            let risk = plug_in_mfdr(&post, &[1, 2, 3], &thr.classified_mask()).unwrap();
            prop_assert!(risk < alpha, "plug-in MFDR {risk} at alpha {alpha}");
        }
    }

    #[test]
    fn optimal_rule_never_loses_to_thresholded_mfnr(
        rows in posterior_rows(40, 3),
        alpha in 0.01..0.99f64,
    ) {
        let post = PosteriorMatrix::from_rows(&rows).unwrap();
        let spec = RuleSpec::all_classes(RiskKind::Mfdr, alpha, 3).unwrap();
        let thr = thresholded_rule(&post, &spec).unwrap();
        let (opt, _) = optimal_rule(&post, &spec).unwrap();
        let mfnr_thr = plug_in_mfnr(&post, &[1, 2, 3], &thr.classified_mask()).unwrap();
        let mfnr_opt = plug_in_mfnr(&post, &[1, 2, 3], &opt.classified_mask()).unwrap();
        prop_assert!(mfnr_opt <= mfnr_thr + 1e-15);
    }

    #[test]
    fn realized_mnpr_is_mfdr_scaled_by_coverage(
        labels in prop::collection::vec(0usize..=2, 1..60),
        truth_bits in prop::collection::vec(1usize..=2, 60),
    ) {
        let n = labels.len();
        let truth = &truth_bits[..n];
        let preds = PredictionVector::new(labels, &[1, 2]).unwrap();
        let report = evaluate(&preds, truth, &[1, 2]).unwrap();
        let scaled = report.realized_mfdr * report.n_classified as f64 / report.n_total as f64;
        prop_assert!((report.realized_mnpr - scaled).abs() <= 1e-15);
    }
}
