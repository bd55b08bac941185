mod common;

use common::{brute_eer, brute_tpr_at, pair_auc, random_set};
use proptest::prelude::*;
use sue_core::data::Label::{self, Attack as A, Bonafide as B};
use sue_core::metrics::{acc, acer, aggregate, apcer, auc, eer, mean_std, roc_curve, tpr_at_fpr, MetricReport, ScoredSet};

fn set(scores: &[f64], labels: &[Label]) -> ScoredSet {
    ScoredSet::new(scores.to_vec(), labels.to_vec()).unwrap()
}

#[test]
fn oracles_agree_on_random_sets() {
    for seed in 0..200 {
        let s = random_set(seed, 200);
        assert_eq!(auc(&s).unwrap(), pair_auc(&s), "seed {seed}");
        assert!((eer(&s).unwrap().0 - brute_eer(&s)).abs() <= 1e-9, "seed {seed}");
        for t in [0.01, 0.05, 0.1, 0.5] {
            assert!((tpr_at_fpr(&s, t).unwrap() - brute_tpr_at(&s, t)).abs() <= 1e-9, "seed {seed} fpr {t}");
        }
    }
}

#[test]
fn perfect_and_inverted_rankings() {
    let good = set(&[0.9, 0.8, 0.2, 0.1], &[A, A, B, B]);
    assert_eq!(auc(&good).unwrap(), 1.0);
    assert_eq!(eer(&good).unwrap().0, 0.0);
    assert_eq!(tpr_at_fpr(&good, 0.01).unwrap(), 1.0);
    let bad = set(&[0.1, 0.2, 0.8, 0.9], &[A, A, B, B]);
    assert_eq!(auc(&bad).unwrap(), 0.0);
    assert_eq!(eer(&bad).unwrap().0, 1.0);
}

#[test]
fn threshold_rule_counts_equal_scores_as_attack() {
    let s = set(&[0.5, 0.5, 0.4, 0.7], &[A, B, A, B]);
    // attack iff score >= 0.5
    let (acer_v, apcer_v, bpcer_v) = acer(&s, 0.5).unwrap();
    assert_eq!((apcer_v, bpcer_v), (0.5, 1.0));
    assert_eq!(acer_v, 0.75);
    assert_eq!(acc(&s, 0.5).unwrap(), 0.25);
    assert!(acer(&s, 1.5).is_err());
}

#[test]
fn apcer_on_attack_only_subset() {
    let s = set(&[0.2, 0.6, 0.9], &[A, A, A]);
    assert!((apcer(&s, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(apcer(&set(&[0.2], &[B]), 0.5).is_err());
}

#[test]
fn eer_threshold_sits_on_the_crossing() {
    let s = set(&[0.1, 0.3, 0.35, 0.6, 0.7, 0.9], &[B, B, A, B, A, A]);
    let (e, t) = eer(&s).unwrap();
    assert!((e - 1.0 / 3.0).abs() < 1e-12);
    let (_, apcer_v, bpcer_v) = acer(&s, t).unwrap();
    assert!((apcer_v - bpcer_v).abs() < 1e-12);
}

#[test]
fn report_fields_are_flat() {
    let s = set(&[0.9, 0.3, 0.6, 0.1], &[A, B, A, B]);
    let r = MetricReport::compute(&s, 0.5).unwrap();
    let f = r.fields();
    let keys: Vec<&str> = f.keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        ["acc", "acer", "apcer", "auc", "bpcer", "eer", "threshold_used", "tpr_at_fpr_0.01", "tpr_at_fpr_0.1"]
    );
    let json = serde_json::to_value(&r).unwrap();
    assert_eq!(serde_json::from_value::<MetricReport>(json).unwrap(), r);
}

#[test]
fn aggregate_is_fieldwise_population_stats() {
    let a = MetricReport::compute(&set(&[0.9, 0.1], &[A, B]), 0.5).unwrap();
    let b = MetricReport::compute(&set(&[0.1, 0.9], &[A, B]), 0.5).unwrap();
    let agg = aggregate(&[a, b]).unwrap();
    assert_eq!(agg["auc"].mean, 0.5);
    assert_eq!(agg["auc"].std, 0.5);
    assert_eq!(agg["acer"].mean, 0.5);
    let m = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(m.mean, 2.5);
    assert!((m.std - 1.25f64.sqrt()).abs() < 1e-15);
    assert_eq!(m.to_string(), "2.5000±1.1180");
}

fn arb_set() -> impl Strategy<Value = ScoredSet> {
    (2usize..120).prop_flat_map(|n| {
        (
            proptest::collection::vec(prop_oneof![0.0f64..=1.0, (0u8..=10).prop_map(|k| k as f64 / 10.0)], n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(scores, mut flags)| {
                flags[0] = true;
                flags[1] = false;
                let labels = flags.into_iter().map(|a| if a { A } else { B }).collect();
                ScoredSet::new(scores, labels).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn auc_matches_pairs(s in arb_set()) {
        prop_assert_eq!(auc(&s).unwrap(), pair_auc(&s));
    }

    #[test]
    fn eer_and_tpr_match_sweep(s in arb_set(), target in 0.001f64..0.999) {
        prop_assert!((eer(&s).unwrap().0 - brute_eer(&s)).abs() <= 1e-9);
        prop_assert!((tpr_at_fpr(&s, target).unwrap() - brute_tpr_at(&s, target)).abs() <= 1e-9);
    }

    #[test]
    fn roc_is_monotone_and_bounded(s in arb_set()) {
        let roc = roc_curve(&s).unwrap();
        prop_assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        let last = roc.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in roc.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            prop_assert!(w[1].threshold < w[0].threshold);
        }
        let e = eer(&s).unwrap().0;
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn flipping_scores_complements_auc(s in arb_set()) {
        // on a 1/1000 grid, 1 - v never merges or splits ties
        let grid: Vec<f64> = s.scores().iter().map(|v| (v * 1000.0).round()).collect();
        let s = ScoredSet::new(grid.iter().map(|k| k / 1000.0).collect(), s.labels().to_vec()).unwrap();
        let flipped = ScoredSet::new(grid.iter().map(|k| (1000.0 - k) / 1000.0).collect(), s.labels().to_vec()).unwrap();
        let sum = auc(&s).unwrap() + auc(&flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn acer_is_mean_of_error_rates(s in arb_set(), t in 0.0f64..=1.0) {
        let (a, ap, bp) = acer(&s, t).unwrap();
        prop_assert_eq!(a, (ap + bp) / 2.0);
        prop_assert!((0.0..=1.0).contains(&acc(&s, t).unwrap()));
    }
}
