use actiondiff::metrics::{accuracy, average_precision, mean_average_precision, pearson};
use actiondiff::selftest::brute_force_ap;
use proptest::prelude::*;

/// Scores on a coarse grid so ties are common.
fn ranked() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..12).prop_flat_map(|n| {
        (proptest::collection::vec(0u8..6, n), proptest::collection::vec(any::<bool>(), n)).prop_filter_map("needs a positive", |(s, mut y)| {
            if !y.iter().any(|&b| b) {
                y[0] = true;
            }
            Some((s.into_iter().map(|v| v as f64 / 5.0).collect(), y))
        })
    })
}

proptest! {
    #[test]
    fn ap_matches_brute_force((s, y) in ranked()) {
        let ap = average_precision(&s, &y).unwrap();
        prop_assert!((ap - brute_force_ap(&s, &y)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn ap_ignores_monotone_rescaling((s, y) in ranked(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let t: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
        prop_assert_eq!(average_precision(&s, &y).unwrap(), average_precision(&t, &y).unwrap());
    }

    #[test]
    fn all_positives_first_is_perfect(pos in 1usize..6, neg in 0usize..6) {
        let s: Vec<f64> = (0..pos + neg).map(|i| -(i as f64)).collect();
        let y: Vec<bool> = (0..pos + neg).map(|i| i < pos).collect();
        prop_assert_eq!(average_precision(&s, &y).unwrap(), 1.0);
    }

    #[test]
    fn pearson_is_symmetric_and_bounded(x in proptest::collection::vec(-10.0f64..10.0, 3..20), seed in 0u64..1000) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * ((seed + i as u64) % 7) as f64 - i as f64).collect();
        if let (Ok(a), Ok(b)) = (pearson(&x, &y), pearson(&y, &x)) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
        }
    }
}

#[test]
fn ap_without_positives_is_an_error() {
    assert!(average_precision(&[0.3, 0.1], &[false, false]).is_err());
}

#[test]
fn map_skips_classes_without_positives() {
    let s = vec![vec![0.9, 0.1, 0.5], vec![0.2, 0.8, 0.4]];
    let y = vec![vec![true, false, false], vec![false, true, false]];
    let m = mean_average_precision(&s, &y).unwrap();
    assert_eq!(m.skipped, vec![2]);
    assert_eq!(m.per_class[2], None);
    assert_eq!(m.map, 1.0);
}

#[test]
fn accuracy_counts_matches() {
    assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap(), 0.75);
    assert!(accuracy(&[0], &[0, 1]).is_err());
}
