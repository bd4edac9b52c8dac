mod common;

use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use transvw::transfer::{auc, dice_iou, ttest_independent, ttest_paired};

#[test]
fn auc_equals_pair_counting_on_100_cases() {
    let mut rng = common::rng(11);
    for case in 0..100 {
        let n = rng.random_range(2..60);
        let coarse = case % 3 == 0;
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(0..4) as f64
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        assert_eq!(
            auc(&scores, &labels).unwrap(),
            common::auc_by_pairs(&scores, &labels),
            "case {case}"
        );
    }
}

#[test]
fn auc_rejects_degenerate_input() {
    assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    assert!(auc(&[0.1], &[1, 0]).is_err());
    assert!(auc(&[f64::NAN, 0.2], &[1, 0]).is_err());
    assert!(auc(&[0.1, 0.2], &[2, 0]).is_err());
}

#[test]
fn dice_iou_closed_forms() {
    let p = [1.0f32, 1.0, 0.0, 0.0, 1.0];
    let t = [1.0f32, 0.0, 0.0, 1.0, 1.0];
    assert_eq!(dice_iou(&p, &t).unwrap(), (4.0 / 6.0, 2.0 / 4.0));
    assert_eq!(dice_iou(&[0.0; 4], &[0.0; 4]).unwrap(), (1.0, 1.0));
    assert_eq!(dice_iou(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), (0.0, 0.0));
    assert!(dice_iou(&[0.5], &[1.0]).is_err());
}

proptest! {
    #[test]
    fn dice_iou_match_set_arithmetic(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let p: Vec<f32> = bits.iter().map(|b| b.0 as u8 as f32).collect();
        let t: Vec<f32> = bits.iter().map(|b| b.1 as u8 as f32).collect();
        let (d, j) = dice_iou(&p, &t).unwrap();
        prop_assert_eq!((d, j), common::dice_iou_by_sets(&p, &t));
        prop_assert!(d == 0.0 && j == 0.0 || (d - 2.0 * j / (1.0 + j)).abs() < 1e-15);
    }
}

#[test]
fn independent_ttest_matches_high_precision_references() {
    for (i, (a, b, t, p)) in common::INDEPENDENT.iter().enumerate() {
        let r = ttest_independent(a, b).unwrap();
        assert!((r.t - t).abs() < 1e-9 * t.abs().max(1.0), "case {i}: t {} vs {t}", r.t);
        assert!((r.p - p).abs() < 1e-6, "case {i}: p {} vs {p}", r.p);
        assert_eq!(r.df, (a.len() + b.len() - 2) as f64);
    }
}

#[test]
fn t_tail_agrees_with_statrs() {
    let mut rng = common::rng(5);
    for _ in 0..200 {
        let df = rng.random_range(1..40) as f64;
        let t: f64 = rng.random_range(-8.0..8.0);
        let d = StudentsT::new(0.0, 1.0, df).unwrap();
        let want = 2.0 * d.cdf(-t.abs());
        let got = transvw::transfer::metrics::student_t_two_sided(t, df);
        assert!((got - want).abs() < 1e-9, "t={t} df={df}: {got} vs {want}");
    }
}

#[test]
fn paired_ttest_is_one_sample_test_of_differences() {
    let a = [0.91, 0.93, 0.90, 0.94, 0.92];
    let b = [0.88, 0.90, 0.89, 0.90, 0.90];
    let r = ttest_paired(&a, &b).unwrap();
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let m = d.iter().sum::<f64>() / 5.0;
    let s = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0).sqrt();
    assert!((r.t - m / (s / 5f64.sqrt())).abs() < 1e-12);
    assert_eq!(r.df, 4.0);
    assert!(r.p_greater() < 0.05 && r.p_greater() > 0.0);
    assert!(ttest_paired(&a, &b[..4]).is_err());
}

#[test]
fn zero_variance_is_flagged() {
    let r = ttest_independent(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
    assert!(r.degenerate && r.p == 0.0);
    let r = ttest_independent(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
    assert!(!r.degenerate && r.p == 1.0);
}
