//! Shapiro-Wilk, paired t-test, Bonferroni, and the per-coordinate normality sweep.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::train::ExperimentRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub sample_size: usize,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

/// Evaluates `c[0] + c[1] x + c[2] x² + ...`.
fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

const SW_C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
const SW_C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
const SW_C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
const SW_C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
const SW_C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
const SW_C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
const SW_G: [f64; 2] = [-2.273, 0.459];

/// Shapiro-Wilk W test, Royston's AS R94 approximation, for `3 <= n <= 5000`.
pub fn shapiro_wilk(sample: &[f64]) -> Result<TestResult> {
    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::invalid(format!(
            "Shapiro-Wilk needs 3..=5000 observations, got {n}"
        )));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("Shapiro-Wilk sample contains non-finite values"));
    }
    let mut x = sample.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let range = x[n - 1] - x[0];
    if range < 1e-19 * x[n - 1].abs().max(1.0) {
        return Err(Error::Degenerate("sample has zero variance".into()));
    }

    let nn2 = n / 2;
    let an = n as f64;
    let norm = std_normal();
    // Antisymmetric coefficients; a[k] pairs x[n-1-k] (positive) with x[k].
    let mut a = vec![0.0; nn2];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let m: Vec<f64> = (0..nn2)
            .map(|i| -norm.inverse_cdf((i as f64 + 1.0 - 0.375) / (an + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&SW_C1, rsn) + m[0] / ssumm2;
        if n > 5 {
            let a2 = poly(&SW_C2, rsn) + m[1] / ssumm2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            a[0] = a1;
            a[1] = a2;
            for i in 2..nn2 {
                a[i] = m[i] / fac;
            }
        } else {
            let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            a[0] = a1;
            for i in 1..nn2 {
                a[i] = m[i] / fac;
            }
        }
    }

    let mean = x.iter().sum::<f64>() / an;
    let ssq: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    let num: f64 = (0..nn2).map(|k| a[k] * (x[n - 1 - k] - x[k])).sum();
    let w = (num * num / ssq).min(1.0);

    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        (1.0 - pi6 * w.sqrt().acos()).max(0.0)
    } else {
        let w1 = (1.0 - w).max(f64::MIN_POSITIVE);
        let y = w1.ln();
        if n <= 11 {
            let gamma = poly(&SW_G, an);
            if y >= gamma {
                1e-19
            } else {
                let y = -(gamma - y).ln();
                let m = poly(&SW_C3, an);
                let s = poly(&SW_C4, an).exp();
                1.0 - norm.cdf((y - m) / s)
            }
        } else {
            let xx = an.ln();
            let m = poly(&SW_C5, xx);
            let s = poly(&SW_C6, xx).exp();
            1.0 - norm.cdf((y - m) / s)
        }
    };
    Ok(TestResult {
        statistic: w,
        p_value: p.clamp(0.0, 1.0),
        sample_size: n,
    })
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let t = mean / (var / nf).sqrt();
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).expect("valid parameters");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TestResult {
        statistic: t,
        p_value: p.clamp(0.0, 1.0),
        sample_size: n,
    })
}

pub fn bonferroni_threshold(alpha: f64, m: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) || m == 0 {
        return Err(Error::invalid(format!(
            "Bonferroni needs alpha in (0,1) and m >= 1 (got {alpha}, {m})"
        )));
    }
    Ok(alpha / m as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateTest {
    pub dataset_id: String,
    pub coordinate: usize,
    pub w: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalitySweep {
    pub tests: Vec<CoordinateTest>,
    /// Coordinates whose across-seed sample could not be tested.
    pub untestable: usize,
    pub alpha: f64,
    pub hypotheses: usize,
    pub corrected_threshold: f64,
    pub rejected_raw: usize,
    pub rejected_corrected: usize,
    /// Ten equal-width bins over [0, 1].
    pub p_histogram: Vec<usize>,
}

/// One Shapiro-Wilk test per weight coordinate per dataset instance, over that
/// instance's seeds. Records are grouped by `dataset_id`; each group should
/// hold one init mode.
pub fn normality_sweep(records: &[&ExperimentRecord], alpha: f64) -> Result<NormalitySweep> {
    let mut groups: std::collections::BTreeMap<&str, Vec<&ExperimentRecord>> = Default::default();
    for r in records {
        groups.entry(r.key.dataset_id.as_str()).or_default().push(r);
    }
    let mut tests = Vec::new();
    let mut untestable = 0;
    let mut max_seeds = 0;
    let mut p_count = 0;
    for (id, mut group) in groups {
        group.sort_by_key(|r| r.key.seed);
        max_seeds = max_seeds.max(group.len());
        let p = group[0].final_weights.len();
        p_count = p_count.max(p);
        for k in 0..p {
            let sample: Vec<f64> = group.iter().map(|r| r.final_weights.values()[k]).collect();
            match shapiro_wilk(&sample) {
                Ok(t) => tests.push(CoordinateTest {
                    dataset_id: id.to_string(),
                    coordinate: k,
                    w: t.statistic,
                    p_value: t.p_value,
                }),
                Err(_) => untestable += 1,
            }
        }
    }
    if tests.is_empty() {
        return Err(Error::Insufficient("no testable weight coordinates".into()));
    }
    let hypotheses = (max_seeds * p_count).max(1);
    let corrected = bonferroni_threshold(alpha, hypotheses)?;
    let mut hist = vec![0usize; 10];
    for t in &tests {
        hist[((t.p_value * 10.0) as usize).min(9)] += 1;
    }
    Ok(NormalitySweep {
        rejected_raw: tests.iter().filter(|t| t.p_value < alpha).count(),
        rejected_corrected: tests.iter().filter(|t| t.p_value < corrected).count(),
        tests,
        untestable,
        alpha,
        hypotheses,
        corrected_threshold: corrected,
        p_histogram: hist,
    })
}

/// Kolmogorov distance between the empirical CDF of `p` and Uniform(0,1).
pub fn ks_distance_uniform(p: &[f64]) -> f64 {
    let mut s = p.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| ((i as f64 + 1.0) / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn sw_rejects_bad_input() {
        assert!(matches!(shapiro_wilk(&[2.0, 2.0, 2.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
        assert!(shapiro_wilk(&vec![0.5; 5001]).is_err());
    }

    // Reference values from scipy.stats.shapiro (AS R94 Fortran).
    #[test]
    fn sw_reference_vectors() {
        let cases: &[(&[f64], f64, f64)] = &[
            (&[1.0, 2.0, 4.0], 0.9642857142857143, 0.6368868),
            (
                &[
                    148.0, 154.0, 158.0, 160.0, 161.0, 162.0, 166.0, 170.0, 182.0, 195.0, 236.0,
                ],
                0.7888147,
                0.0067038,
            ),
            (
                &[
                    2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0, 41.0, 43.0, 47.0,
                ],
                0.9314964,
                0.2872631,
            ),
        ];
        for (x, w, p) in cases {
            let r = shapiro_wilk(x).unwrap();
            assert!((r.statistic - w).abs() < 1e-3, "W {} vs {w}", r.statistic);
            assert!((r.p_value - p).abs() < 5e-3, "p {} vs {p}", r.p_value);
        }
    }

    #[test]
    fn sw_accepts_gaussian_samples() {
        let mut passes = 0;
        for trial in 0..100 {
            let mut rng = derive_stream(trial, "sw-test");
            let x: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
            let r = shapiro_wilk(&x).unwrap();
            assert!(r.statistic > 0.0 && r.statistic <= 1.0);
            if r.p_value > 0.05 {
                passes += 1;
            }
        }
        assert!(passes >= 90, "{passes}");
    }

    #[test]
    fn t_test_examples() {
        assert!(matches!(
            paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]),
            Err(Error::Degenerate(_))
        ));
        let r = paired_t_test(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_relative_eq!(r.p_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn t_test_textbook_fixture() {
        // d = a - b = [1, 2, -1, 3, 0, 2, 1, 4, -2, 1]: mean 1.1, sd = sqrt(28.9 / 9).
        let a = [11.0, 12.0, 9.0, 13.0, 10.0, 12.0, 11.0, 14.0, 8.0, 11.0];
        let b = [10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0];
        let r = paired_t_test(&a, &b).unwrap();
        let t = 1.1 / ((28.9f64 / 9.0).sqrt() / 10f64.sqrt());
        assert_relative_eq!(r.statistic, t, epsilon = 1e-12);
        // scipy.stats.ttest_rel(a, b).pvalue
        assert!((r.p_value - 0.08415031).abs() < 1e-6, "{}", r.p_value);
        assert_eq!(paired_t_test(&b, &a).unwrap().statistic, -r.statistic);
    }

    #[test]
    fn bonferroni() {
        assert_eq!(bonferroni_threshold(0.05, 1).unwrap(), 0.05);
        assert_eq!(bonferroni_threshold(0.05, 50 * 51).unwrap(), 0.05 / 2550.0);
        assert!(bonferroni_threshold(0.05, 10).unwrap() > bonferroni_threshold(0.05, 11).unwrap());
        assert!(bonferroni_threshold(1.5, 1).is_err());
    }

    #[test]
    fn ks_distance_of_grid_is_small() {
        let p: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert_relative_eq!(ks_distance_uniform(&p), 0.005, epsilon = 1e-12);
    }

    #[test]
    fn uniform_samples_mostly_rejected() {
        let mut rejected = 0;
        for trial in 0..20 {
            let mut rng = derive_stream(trial, "sw-uniform");
            let x: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
            if shapiro_wilk(&x).unwrap().p_value < 0.05 {
                rejected += 1;
            }
        }
        assert!(rejected > 10);
    }
}
