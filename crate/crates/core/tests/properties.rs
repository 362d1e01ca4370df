use std::collections::BTreeSet;

use proptest::prelude::*;

use cre_core::evaluation::{pr_curve, step_precision, PredictionRecord};
use cre_core::objective::{aggregate, normalize, pair_loss, targets, top_k, Aggregation};
use cre_core::scoring::{score_complex, score_transe};

fn positive_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1e3, 1..max_len)
}

fn triple(k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    let v = || prop::collection::vec(-2.0f64..2.0, k);
    (v(), v(), v())
}

fn records() -> impl Strategy<Value = Vec<PredictionRecord>> {
    prop::collection::vec((0usize..6, 1usize..5, 1u32..6, any::<bool>()), 0..40).prop_map(|rs| {
        rs.into_iter()
            .map(|(p, relation, s, correct)| PredictionRecord {
                pair_id: format!("P{p}"),
                relation,
                score: f64::from(s) / 10.0,
                correct,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn normalization_sums_to_one(v in positive_vec(20)) {
        let n = normalize(&v).unwrap();
        prop_assert!((n.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(n.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn scores_stay_in_range((h, r, t) in (1usize..12).prop_flat_map(|k| triple(2 * k))) {
        let te = score_transe(&h, &r, &t).unwrap();
        prop_assert!(te > 0.0 && te <= 1.0);
        let ce = score_complex(&h, &r, &t).unwrap();
        prop_assert!(ce > 0.0 && ce <= 2.0);
    }

    #[test]
    fn aggregation_ignores_sentence_order(
        bag in prop::collection::vec(prop::collection::vec(0.0f64..2.0, 4), 1..8),
        seed in any::<u64>(),
    ) {
        let mut shuffled = bag.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize).wrapping_mul(i + 7) % n);
        }
        for mode in [Aggregation::Sum, Aggregation::Max, Aggregation::Min, Aggregation::Mean] {
            let a = aggregate(&bag, mode).unwrap();
            let b = aggregate(&shuffled, mode).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn ranking_survives_normalization(v in positive_vec(12), k in 1usize..12) {
        let raw: Vec<usize> = top_k(&v, k).into_iter().map(|(i, _)| i).collect();
        let normed: Vec<usize> = top_k(&normalize(&v).unwrap(), k).into_iter().map(|(i, _)| i).collect();
        prop_assert_eq!(raw, normed);
    }

    #[test]
    fn top_k_is_sorted_and_saturates(v in positive_vec(12), k in 1usize..20) {
        let top = top_k(&v, k);
        prop_assert_eq!(top.len(), k.min(v.len()));
        for w in top.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn loss_is_nonnegative(v in positive_vec(8), gold_bits in 1u32..255) {
        let n = v.len();
        let gold: BTreeSet<usize> = (0..n).filter(|i| gold_bits & (1 << i) != 0).collect();
        prop_assume!(!gold.is_empty());
        let m = targets(&gold, n).unwrap();
        prop_assert!((m.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(pair_loss(&normalize(&v).unwrap(), &m, gold.len()) >= 0.0);
    }

    #[test]
    fn recall_never_decreases(rs in records(), extra in 0usize..5) {
        let gold = rs.iter().filter(|r| r.correct).count() + extra;
        prop_assume!(gold > 0);
        let curve = pr_curve(&rs, gold).unwrap();
        prop_assert_eq!(curve.len(), rs.len());
        for w in curve.windows(2) {
            prop_assert!(w[0].recall <= w[1].recall);
        }
        for p in &curve {
            prop_assert!((0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall));
        }
    }

    #[test]
    fn step_interpolation_reads_an_existing_point(rs in records(), g in 0.0f64..1.0) {
        let gold = rs.iter().filter(|r| r.correct).count().max(1);
        let curve = pr_curve(&rs, gold).unwrap();
        match step_precision(&curve, g) {
            None => prop_assert!(curve.is_empty()),
            Some(p) => prop_assert!(curve.iter().any(|c| c.precision == p)),
        }
    }
}
