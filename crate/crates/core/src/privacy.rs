//! Gaussian output perturbation, with the added noise reduced by the
//! variability the training seed already provides.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{default_delta, gaussian_c, weight_distance};
use crate::data::DatasetInstance;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, WeightVector};
use crate::rng::{derive_indexed_stream, Stream, TAG_NOISE};
use crate::stats::{paired_t_test, TestResult};
use crate::train::accuracy;

/// Default significance threshold for the utility comparison.
pub const DEFAULT_SIGNIFICANCE: f64 = 1e-6;

/// Stated on every released noise figure: the reduction is valid only if the
/// seed-induced spread of SGD is itself Gaussian.
pub const ASSUMPTION_NOTE: &str =
    "sigma_augment relies on treating seeded SGD as a Gaussian mechanism with stddev sigma_i; this is an estimate, not a privacy guarantee";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: f64,
}

impl PrivacyParams {
    /// δ defaults to `1/N²`.
    pub fn new(epsilon: f64, sensitivity: f64, n: usize) -> Self {
        PrivacyParams {
            epsilon,
            delta: default_delta(n),
            sensitivity,
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }
}

/// `σ = c Δ₂ / ε`.
pub fn sigma_target(params: &PrivacyParams) -> Result<f64> {
    let c = gaussian_c(params.delta)?;
    if !(params.epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {}",
            params.epsilon
        )));
    }
    if !(params.sensitivity >= 0.0) {
        return Err(Error::invalid(format!(
            "sensitivity must be nonnegative, got {}",
            params.sensitivity
        )));
    }
    Ok(c * params.sensitivity / params.epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDecision {
    pub sigma_target: f64,
    pub sigma_i: f64,
    pub sigma_augment: f64,
    /// The intrinsic spread already reaches the target.
    pub clipped: bool,
}

pub fn sigma_augment(sigma_target: f64, sigma_i: f64) -> NoiseDecision {
    let clipped = sigma_i >= sigma_target;
    NoiseDecision {
        sigma_target,
        sigma_i,
        sigma_augment: if clipped {
            0.0
        } else {
            (sigma_target * sigma_target - sigma_i * sigma_i).sqrt()
        },
        clipped,
    }
}

/// Standard normal vector of length `p`.
pub fn standard_noise(p: usize, stream: &mut Stream) -> Vec<f64> {
    (0..p).map(|_| StandardNormal.sample(stream)).collect()
}

/// `w + σ z` with `z` a standard normal vector drawn from `stream`.
pub fn privatize(w: &WeightVector, sigma: f64, stream: &mut Stream) -> Result<WeightVector> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be nonnegative, got {sigma}")));
    }
    let z = standard_noise(w.len(), stream);
    Ok(add_scaled(w, &z, sigma))
}

fn add_scaled(w: &WeightVector, z: &[f64], sigma: f64) -> WeightVector {
    let mut out = w.clone();
    if sigma > 0.0 {
        for (v, zi) in out.values_mut().iter_mut().zip(z) {
            *v += sigma * zi;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Noiseless,
    /// Full target noise, treating SGD as deterministic.
    Deterministic,
    /// Target noise reduced by the intrinsic spread.
    Reduced,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Noiseless => "noiseless",
            Variant::Deterministic => "sgd_d",
            Variant::Reduced => "sgd_r",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilityRow {
    pub model_id: String,
    pub epsilon: f64,
    pub variant: Variant,
    pub accuracy: f64,
    /// `‖w_variant − w‖`.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilitySummary {
    pub epsilon: f64,
    pub noise: NoiseDecision,
    pub noiseless: MeanStd,
    pub deterministic: MeanStd,
    pub reduced: MeanStd,
    /// Paired t-test of SGD_r against SGD_d; `None` when the differences are
    /// degenerate or fewer than two models exist.
    pub t_test: Option<TestResult>,
    pub significant: bool,
    /// `(acc_r − acc_d) / (acc_noiseless − acc_d)` on mean accuracies; `None`
    /// when the gap is not positive.
    pub percent_of_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilityTable {
    pub sensitivity: f64,
    pub sigma_i: f64,
    pub delta: f64,
    pub noise_seed: u64,
    pub assumption: &'static str,
    pub summaries: Vec<UtilitySummary>,
    #[serde(skip)]
    pub rows: Vec<UtilityRow>,
}

impl UtilityTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id,epsilon,variant,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.model_id,
                r.epsilon,
                r.variant.as_str(),
                r.accuracy
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityInputs<'a> {
    pub spec: ModelSpec,
    /// `(model id, weights)`; the index in this list picks the noise stream.
    pub models: &'a [(String, WeightVector)],
    pub test: &'a DatasetInstance,
    pub sensitivity: f64,
    pub sigma_i: f64,
    pub delta: f64,
    pub epsilons: &'a [f64],
    pub noise_seed: u64,
    pub significance: f64,
}

pub fn percent_of_gap(noiseless: f64, deterministic: f64, reduced: f64) -> Option<f64> {
    let gap = noiseless - deterministic;
    (gap > 0.0).then(|| (reduced - deterministic) / gap)
}

/// Paired comparison of noiseless, SGD_d and SGD_r releases. Each model gets
/// one standard normal vector, scaled to every σ under test.
pub fn compare_utilities(inp: &UtilityInputs<'_>) -> Result<UtilityTable> {
    if inp.models.is_empty() {
        return Err(Error::Empty("models"));
    }
    if inp.epsilons.is_empty() {
        return Err(Error::Empty("epsilons"));
    }
    let decisions = inp
        .epsilons
        .iter()
        .map(|&eps| {
            let params = PrivacyParams {
                epsilon: eps,
                delta: inp.delta,
                sensitivity: inp.sensitivity,
            };
            Ok(sigma_augment(sigma_target(&params)?, inp.sigma_i))
        })
        .collect::<Result<Vec<_>>>()?;

    // rows[model][eps] = (noiseless, d, r)
    let per_model: Vec<Vec<[UtilityRow; 3]>> = inp
        .models
        .par_iter()
        .enumerate()
        .map(|(idx, (id, w))| {
            let z = standard_noise(
                w.len(),
                &mut derive_indexed_stream(inp.noise_seed, TAG_NOISE, idx as u64),
            );
            let acc0 = accuracy(&inp.spec, w, inp.test)?;
            inp.epsilons
                .iter()
                .zip(&decisions)
                .map(|(&eps, dec)| {
                    let wd = add_scaled(w, &z, dec.sigma_target);
                    let wr = add_scaled(w, &z, dec.sigma_augment);
                    let row = |variant, accuracy, distance| UtilityRow {
                        model_id: id.clone(),
                        epsilon: eps,
                        variant,
                        accuracy,
                        distance,
                    };
                    Ok([
                        row(Variant::Noiseless, acc0, 0.0),
                        row(
                            Variant::Deterministic,
                            accuracy(&inp.spec, &wd, inp.test)?,
                            weight_distance(&wd, w)?,
                        ),
                        row(
                            Variant::Reduced,
                            accuracy(&inp.spec, &wr, inp.test)?,
                            weight_distance(&wr, w)?,
                        ),
                    ])
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut summaries = Vec::new();
    for (e, (&eps, dec)) in inp.epsilons.iter().zip(&decisions).enumerate() {
        let col = |v: usize| per_model.iter().map(|m| m[e][v].accuracy).collect::<Vec<f64>>();
        let (a0, ad, ar) = (col(0), col(1), col(2));
        let t_test = if inp.models.len() >= 2 {
            match paired_t_test(&ar, &ad) {
                Ok(t) => Some(t),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let (m0, md, mr) = (mean_std(&a0), mean_std(&ad), mean_std(&ar));
        summaries.push(UtilitySummary {
            epsilon: eps,
            noise: *dec,
            significant: t_test.is_some_and(|t| t.p_value < inp.significance),
            percent_of_gap: percent_of_gap(m0.mean, md.mean, mr.mean),
            noiseless: m0,
            deterministic: md,
            reduced: mr,
            t_test,
        });
    }

    let mut rows = Vec::with_capacity(per_model.len() * inp.epsilons.len() * 3);
    for e in 0..inp.epsilons.len() {
        for m in &per_model {
            rows.extend(m[e].iter().cloned());
        }
    }
    Ok(UtilityTable {
        sensitivity: inp.sensitivity,
        sigma_i: inp.sigma_i,
        delta: inp.delta,
        noise_seed: inp.noise_seed,
        assumption: ASSUMPTION_NOTE,
        summaries,
        rows,
    })
}
