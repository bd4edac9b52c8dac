//! Evaluation metrics and significance tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half. Runs in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::usage(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|l| **l > 1) {
        return Err(Error::usage(format!("AUC labels must be 0 or 1, got {l}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::usage("AUC scores contain NaN"));
    }
    let pos = labels.iter().filter(|l| **l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::usage("AUC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let p = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += p * twice_avg;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// `(dice, iou)` of two binary masks; both empty counts as perfect agreement.
pub fn dice_iou(pred: &[f32], truth: &[f32]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::usage(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        for v in [p, t] {
            if v != 0.0 && v != 1.0 {
                return Err(Error::usage(format!("mask value {v} is not binary")));
            }
        }
        a += (p == 1.0) as u64;
        b += (t == 1.0) as u64;
        both += (p == 1.0 && t == 1.0) as u64;
    }
    if a + b == 0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * both as f64 / (a + b) as f64;
    let iou = both as f64 / (a + b - both) as f64;
    Ok((dice, iou))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Zero variance with different means: `t` is infinite and `p` is 0.
    pub degenerate: bool,
}

impl TTest {
    /// One-sided p-value for the alternative "first sample is larger".
    pub fn p_greater(&self) -> f64 {
        if self.t > 0.0 {
            self.p / 2.0
        } else {
            1.0 - self.p / 2.0
        }
    }

    fn from_stat(num: f64, se2: f64, df: f64) -> TTest {
        if se2 == 0.0 {
            return if num == 0.0 {
                TTest {
                    t: 0.0,
                    df,
                    p: 1.0,
                    degenerate: false,
                }
            } else {
                TTest {
                    t: num.signum() * f64::INFINITY,
                    df,
                    p: 0.0,
                    degenerate: true,
                }
            };
        }
        let t = num / se2.sqrt();
        TTest {
            t,
            df,
            p: student_t_two_sided(t, df),
            degenerate: false,
        }
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    (m, ss)
}

/// Pooled-variance Student's t-test for two independent samples.
pub fn ttest_independent(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::usage("each t-test sample needs at least 2 values"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::usage("t-test samples must be finite"));
    }
    let (ma, ssa) = mean_var(a);
    let (mb, ssb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let pooled = (ssa + ssb) / df;
    Ok(TTest::from_stat(ma - mb, pooled * (1.0 / na + 1.0 / nb), df))
}

/// Paired t-test on the differences `a[i] - b[i]`.
pub fn ttest_paired(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::usage("paired t-test needs equally long samples"));
    }
    if a.len() < 2 {
        return Err(Error::usage("paired t-test needs at least 2 pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("t-test samples must be finite"));
    }
    let (m, ss) = mean_var(&d);
    let n = d.len() as f64;
    Ok(TTest::from_stat(m, ss / (n - 1.0) / n, n - 1.0))
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        let odd = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        let mut delta = 1.0;
        for num in [even, odd] {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            delta = d * c;
            h *= delta;
        }
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Scores of repeated runs of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub scores: Vec<f64>,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl EvalResult {
    pub fn new(metric: impl Into<String>, scores: Vec<f64>, seeds: Vec<u64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::usage("an evaluation needs at least one run"));
        }
        if scores.len() != seeds.len() {
            return Err(Error::usage("one seed per score is required"));
        }
        let (mean, std) = mean_std(&scores);
        Ok(EvalResult {
            metric: metric.into(),
            scores,
            seeds,
            mean,
            std,
        })
    }
}

pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let (m, ss) = mean_var(x);
    let std = if x.len() > 1 {
        (ss / (x.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (m, std)
}

pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_trivial_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[0.1, 0.2], &[1, 2]).is_err());
    }

    #[test]
    fn dice_iou_closed_forms() {
        let a = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let b = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert_eq!(dice_iou(&a, &b).unwrap(), (0.5, 1.0 / 3.0));
        assert_eq!(dice_iou(&a, &a).unwrap(), (1.0, 1.0));
        let c = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(dice_iou(&a, &c).unwrap(), (0.0, 0.0));
        assert_eq!(dice_iou(&[0.0; 3], &[0.0; 3]).unwrap(), (1.0, 1.0));
        assert!(dice_iou(&[0.5], &[1.0]).is_err());
    }

    #[test]
    fn ttest_edge_cases() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let same = ttest_independent(&a, &a).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        let flat = ttest_independent(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert!(flat.degenerate && flat.t == f64::NEG_INFINITY && flat.p == 0.0);
        let eq = ttest_independent(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!(!eq.degenerate && eq.p == 1.0);
        assert!(ttest_independent(&[1.0], &a).is_err());
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn eval_result_recomputes() {
        let r = EvalResult::new("auc", vec![0.5, 0.7, 0.9], vec![0, 1, 2]).unwrap();
        assert!((r.mean - 0.7).abs() < 1e-15);
        assert!((r.std - 0.2).abs() < 1e-15);
        assert!(EvalResult::new("auc", vec![], vec![]).is_err());
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }
}
