//! Closed-form variability bounds and the fixed-point distribution of random
//! permutations.

use num_bigint::BigUint;
use num_rational::BigRational;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::theoretical_sensitivity;
use crate::error::{Error, Result};
use crate::rng::{derive_indexed_stream, TAG_PERMUTATION};

/// Largest N handled with exact arithmetic.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub passes: f64,
    pub lipschitz: f64,
    pub learning_rate: f64,
    pub n: usize,
    pub batch_size: usize,
}

/// `2 k L N η`.
pub fn variability_upper_bound(b: &BoundInputs) -> f64 {
    2.0 * b.passes * b.lipschitz * b.n as f64 * b.learning_rate
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

/// Mean `2kLη(N−1)` and variance `(2Lη)² k` of the fixed-point bound.
pub fn expected_variability_bound(b: &BoundInputs) -> Moments {
    let two_l_eta = 2.0 * b.lipschitz * b.learning_rate;
    Moments {
        mean: two_l_eta * b.passes * (b.n as f64 - 1.0).max(0.0),
        variance: two_l_eta * two_l_eta * b.passes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChebyshevTail {
    /// `4 / (k (N−2)²)`, clamped to 1.
    pub probability: f64,
    /// Deviation `k L η (N−2)` the tail refers to.
    pub threshold: f64,
    /// The unclamped bound exceeded 1 (always the case for N < 3).
    pub vacuous: bool,
}

pub fn chebyshev_tail(k: u64, n: usize, lipschitz: f64, learning_rate: f64) -> Result<ChebyshevTail> {
    if k == 0 {
        return Err(Error::invalid("Chebyshev tail needs k >= 1"));
    }
    let m = n as f64 - 2.0;
    let raw = if n < 3 { f64::INFINITY } else { 4.0 / (k as f64 * m * m) };
    Ok(ChebyshevTail {
        probability: raw.min(1.0),
        threshold: k as f64 * lipschitz * learning_rate * m,
        vacuous: raw > 1.0,
    })
}

fn factorial(n: usize) -> BigUint {
    (1..=n as u64).fold(BigUint::from(1u32), |acc, k| acc * k)
}

fn binomial(n: usize, k: usize) -> BigUint {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Derangement counts `!0 ..= !n`.
pub fn subfactorials(n: usize) -> Vec<BigUint> {
    let mut d = vec![BigUint::from(1u32), BigUint::from(0u32)];
    for k in 2..=n {
        let next = BigUint::from(k as u64 - 1) * (&d[k - 1] + &d[k - 2]);
        d.push(next);
    }
    d.truncate(n + 1);
    d
}

/// Rencontres numbers `D_{N,j} = C(N,j) · !(N−j)` for `j = 0..=N`.
pub fn rencontres(n: usize) -> Vec<BigUint> {
    let sub = subfactorials(n);
    (0..=n).map(|j| binomial(n, j) * &sub[n - j]).collect()
}

/// Exact `P(X = j)` for the number of fixed points of a uniform permutation.
pub fn fixed_point_distribution(n: usize) -> Result<Vec<BigRational>> {
    if !(1..=EXACT_MAX_N).contains(&n) {
        return Err(Error::invalid(format!(
            "exact distribution supports 1 <= N <= {EXACT_MAX_N}, got {n}"
        )));
    }
    let total = factorial(n);
    Ok(rencontres(n)
        .into_iter()
        .map(|c| BigRational::new(c.into(), total.clone().into()))
        .collect())
}

/// Same probabilities as floats, falling back to Poisson(1) above the exact range.
pub fn fixed_point_probabilities(n: usize) -> Result<Vec<f64>> {
    use num_traits::ToPrimitive;
    if n <= EXACT_MAX_N {
        return Ok(fixed_point_distribution(n)?
            .iter()
            .map(|p| p.to_f64().expect("probability fits in f64"))
            .collect());
    }
    Ok(poisson_one(n))
}

/// Poisson(1) pmf on `0..=n`.
pub fn poisson_one(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut p = (-1.0f64).exp();
    for j in 0..=n {
        out.push(p);
        p /= (j + 1) as f64;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarlo {
    pub trials: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
    /// Three standard errors.
    pub confidence_radius: f64,
}

/// Fixed points of `trials` seeded uniform shuffles of `0..n`. Trial `t`
/// draws from its own stream, so results do not depend on thread count.
pub fn monte_carlo_fixed_points(n: usize, trials: usize, seed: u64) -> Result<MonteCarlo> {
    if trials < 100 {
        return Err(Error::invalid(format!(
            "Monte Carlo needs at least 100 trials, got {trials}"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("N must be positive"));
    }
    let counts: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut derive_indexed_stream(seed, TAG_PERMUTATION, t as u64));
            perm.iter().enumerate().filter(|(i, p)| i == *p).count() as f64
        })
        .collect();
    let m = trials as f64;
    let mean = counts.iter().sum::<f64>() / m;
    let variance = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let std_error = (variance / m).sqrt();
    Ok(MonteCarlo {
        trials,
        mean,
        variance,
        std_error,
        confidence_radius: 3.0 * std_error,
    })
}

/// Variability bound next to the sensitivity bound, per example and per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundComparison {
    pub inputs: BoundInputs,
    /// `2kLNη`.
    pub variability: f64,
    /// `2kLη`.
    pub sensitivity: f64,
    /// `2kLη / B`.
    pub sensitivity_batched: f64,
    /// `variability / sensitivity`, equal to N.
    pub ratio: f64,
    pub ratio_batched: f64,
    pub expected: Moments,
    pub chebyshev: Option<ChebyshevTail>,
}

pub fn compare_bounds(b: &BoundInputs) -> Result<BoundComparison> {
    if b.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let variability = variability_upper_bound(b);
    let sensitivity = theoretical_sensitivity(b.passes, b.lipschitz, b.learning_rate, 1);
    let sensitivity_batched = theoretical_sensitivity(b.passes, b.lipschitz, b.learning_rate, b.batch_size);
    let k_int = b.passes.round();
    let chebyshev = if (b.passes - k_int).abs() < 1e-12 && k_int >= 1.0 {
        Some(chebyshev_tail(k_int as u64, b.n, b.lipschitz, b.learning_rate)?)
    } else {
        None
    };
    Ok(BoundComparison {
        inputs: *b,
        variability,
        sensitivity,
        sensitivity_batched,
        ratio: variability / sensitivity,
        ratio_batched: variability / sensitivity_batched,
        expected: expected_variability_bound(b),
        chebyshev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_traits::{One, Zero};

    fn inputs(k: f64, n: usize) -> BoundInputs {
        BoundInputs {
            passes: k,
            lipschitz: 2f64.sqrt(),
            learning_rate: 0.5,
            n,
            batch_size: 1,
        }
    }

    #[test]
    fn upper_bound_examples() {
        assert_eq!(variability_upper_bound(&inputs(0.0, 10)), 0.0);
        assert_relative_eq!(
            variability_upper_bound(&inputs(1.0, 10)),
            14.142135623730951,
            epsilon = 1e-12
        );
        let b = inputs(3.0, 17);
        let r = variability_upper_bound(&b) / theoretical_sensitivity(3.0, b.lipschitz, 0.5, 1);
        assert_relative_eq!(r, 17.0, epsilon = 1e-12);
    }

    #[test]
    fn expected_bound_examples() {
        assert_eq!(expected_variability_bound(&inputs(1.0, 1)).mean, 0.0);
        let m = expected_variability_bound(&inputs(1.0, 10));
        assert_relative_eq!(m.mean, 12.727922061357855, epsilon = 1e-12);
        assert_eq!(m.variance, expected_variability_bound(&inputs(1.0, 1000)).variance);
        assert!(m.mean < variability_upper_bound(&inputs(1.0, 10)));
    }

    #[test]
    fn chebyshev_examples() {
        assert_eq!(chebyshev_tail(1, 4, 1.0, 1.0).unwrap().probability, 1.0);
        assert!(!chebyshev_tail(1, 4, 1.0, 1.0).unwrap().vacuous);
        assert_relative_eq!(
            chebyshev_tail(7, 9000, 1.0, 1.0).unwrap().probability,
            4.0 / (7.0 * 8998.0f64.powi(2)),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            chebyshev_tail(7, 9000, 1.0, 1.0).unwrap().probability,
            7.06e-9,
            max_relative = 1e-3
        );
        let low = chebyshev_tail(1, 2, 1.0, 1.0).unwrap();
        assert!(low.vacuous && low.probability == 1.0);
        assert!(chebyshev_tail(0, 5, 1.0, 1.0).is_err());
    }

    #[test]
    fn chebyshev_is_variance_over_threshold_squared() {
        for (k, n, l, eta) in [(1u64, 10usize, 1.3, 0.2), (5, 100, 0.7, 2.0), (20, 7, 2.0, 0.01)] {
            let t = chebyshev_tail(k, n, l, eta).unwrap();
            let b = BoundInputs {
                passes: k as f64,
                lipschitz: l,
                learning_rate: eta,
                n,
                batch_size: 1,
            };
            let v = expected_variability_bound(&b).variance;
            assert_relative_eq!(
                t.probability,
                (v / (t.threshold * t.threshold)).min(1.0),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn n3_distribution_by_enumeration() {
        let p = fixed_point_distribution(3).unwrap();
        let r = |a: i64, b: i64| BigRational::new(a.into(), b.into());
        assert_eq!(p, vec![r(1, 3), r(1, 2), r(0, 1), r(1, 6)]);
    }

    #[test]
    fn exact_moments() {
        for n in 1..=EXACT_MAX_N {
            let p = fixed_point_distribution(n).unwrap();
            let sum: BigRational = p.iter().cloned().sum();
            assert!(sum.is_one());
            let mean: BigRational = p
                .iter()
                .enumerate()
                .map(|(j, q)| q * BigRational::from_integer((j as i64).into()))
                .sum();
            assert!(mean.is_one(), "N={n}");
            if n >= 2 {
                let second: BigRational = p
                    .iter()
                    .enumerate()
                    .map(|(j, q)| q * BigRational::from_integer(((j * j) as i64).into()))
                    .sum();
                assert!((second - &mean * &mean).is_one(), "N={n}");
                assert!(p[n - 1].is_zero());
            }
        }
        assert!(fixed_point_distribution(0).is_err());
        assert!(fixed_point_distribution(21).is_err());
    }

    #[test]
    fn converges_to_poisson() {
        let tv = |n: usize| -> f64 {
            let p = fixed_point_probabilities(n).unwrap();
            let q = poisson_one(n);
            let tail = 1.0 - q.iter().sum::<f64>();
            0.5 * (p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() + tail)
        };
        let d: Vec<f64> = (4..=12).map(tv).collect();
        assert!(d.windows(2).all(|w| w[1] < w[0]), "{d:?}");
        assert_eq!(fixed_point_probabilities(30).unwrap(), poisson_one(30));
    }

    #[test]
    fn monte_carlo_examples() {
        let one = monte_carlo_fixed_points(1, 100, 0).unwrap();
        assert_eq!(one.mean, 1.0);
        assert_eq!(one.variance, 0.0);
        let mc = monte_carlo_fixed_points(50, 100_000, 1).unwrap();
        assert!((mc.mean - 1.0).abs() < mc.confidence_radius, "{mc:?}");
        assert_eq!(
            monte_carlo_fixed_points(50, 1000, 2).unwrap(),
            monte_carlo_fixed_points(50, 1000, 2).unwrap()
        );
        assert!(monte_carlo_fixed_points(5, 99, 0).is_err());
    }

    #[test]
    fn variability_bound_exceeds_sensitivity_bound() {
        let r = compare_bounds(&BoundInputs {
            passes: 2.0,
            lipschitz: 2f64.sqrt(),
            learning_rate: 0.5,
            n: 100,
            batch_size: 10,
        })
        .unwrap();
        assert_relative_eq!(r.ratio, 100.0, epsilon = 1e-9);
        assert_relative_eq!(r.ratio_batched, 1000.0, epsilon = 1e-9);
        assert!(r.variability > r.sensitivity);
        assert!(r.chebyshev.is_some());
    }
}
