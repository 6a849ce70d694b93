mod common;

use auranet::metrics::{self, MetricsError};
use auranet::{BinaryMask, ProbabilityMap};
use proptest::prelude::*;

#[test]
fn counts_rates_and_hausdorff_match_brute_force() {
    let summary = common::suites::metric_oracles().unwrap_or_else(|e| panic!("{e}"));
    println!("{summary}");
}

#[test]
fn distance_transform_matches_nearest_point_search() {
    let mut r = common::rng(21);
    for _ in 0..20 {
        let m = common::random_mask(13, 9, 0.1, &mut r);
        if m.foreground_count() == 0 {
            continue;
        }
        let dt = metrics::squared_distance_transform(&m);
        for i in 0..13 {
            for j in 0..9 {
                let mut best = f64::INFINITY;
                for a in 0..13 {
                    for b in 0..9 {
                        if m.get(a, b) {
                            best = best.min(((i as f64 - a as f64).powi(2)) + (j as f64 - b as f64).powi(2));
                        }
                    }
                }
                assert_eq!(dt[i * 9 + j], best);
            }
        }
    }
}

#[test]
fn hausdorff_of_two_points() {
    let a = BinaryMask::from_fn(10, 10, |i, j| (i, j) == (1, 1));
    let b = BinaryMask::from_fn(10, 10, |i, j| (i, j) == (4, 5));
    assert_eq!(metrics::hausdorff(&a, &b).unwrap(), 5.0);
}

#[test]
fn hausdorff_with_an_empty_side_is_undefined() {
    let a = BinaryMask::from_fn(4, 4, |i, _| i == 0);
    let e = BinaryMask::zeros(4, 4);
    assert!(matches!(metrics::hausdorff(&a, &e), Err(MetricsError::UndefinedHausdorff { .. })));
    let r = metrics::evaluate_masks(&e, &a).unwrap();
    assert_eq!(r.hausdorff, None);
    assert_eq!(r.iou, 0.0);
    // tp + fp = 0: precision is 0/0, reported as 1 and flagged.
    assert_eq!(r.precision, 1.0);
    assert!(r.undefined.precision && !r.undefined.recall);
}

#[test]
fn threshold_is_inclusive() {
    let p = ProbabilityMap::from_rows(&[&[0.5f64, 0.4999]]).unwrap();
    let m = metrics::binarize(&p, 0.5).unwrap();
    assert!(m.get(0, 0) && !m.get(0, 1));
}

fn pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..14, 1usize..14).prop_flat_map(|(h, w)| {
        (proptest::collection::vec(0u8..=1, h * w), proptest::collection::vec(0u8..=1, h * w))
            .prop_map(move |(a, b)| (BinaryMask::from_vec(h, w, a).unwrap(), BinaryMask::from_vec(h, w, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn rates_lie_in_unit_interval_and_dice_tracks_iou((a, b) in pair()) {
        let r = metrics::evaluate_masks(&a, &b).unwrap();
        for v in [r.iou, r.dice, r.precision, r.recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((r.dice - 2.0 * r.iou / (1.0 + r.iou)).abs() < 1e-12);
        prop_assert!(r.iou <= r.dice);
        prop_assert_eq!(r.counts.total() as usize, a.shape().0 * a.shape().1);
    }

    #[test]
    fn hausdorff_is_symmetric_and_zero_on_identity((a, b) in pair()) {
        match (metrics::hausdorff(&a, &b), metrics::hausdorff(&b, &a)) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "asymmetric definedness {:?}", other),
        }
        if a.foreground_count() > 0 {
            prop_assert_eq!(metrics::hausdorff(&a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn hausdorff_matches_all_pairs((a, b) in pair()) {
        let got = metrics::hausdorff(&a, &b).ok();
        let want = common::oracles::hausdorff_all_pairs(&a, &b);
        match (got, want) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-9),
            (None, None) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn swapping_roles_swaps_precision_and_recall((a, b) in pair()) {
        let ab = metrics::evaluate_masks(&a, &b).unwrap();
        let ba = metrics::evaluate_masks(&b, &a).unwrap();
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert_eq!(ab.iou, ba.iou);
    }
}
