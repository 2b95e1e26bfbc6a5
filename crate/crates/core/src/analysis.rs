//! Sensitivity, intrinsic variability and ε estimates over a grid of runs.
//!
//! Every function here is a pure function of the record set: records are
//! grouped into ordered maps before any reduction, so the caller's ordering
//! never matters.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InitMode, WeightVector};
use crate::rng::{derive_stream, TAG_RESAMPLE};
use crate::train::{ExperimentRecord, RecordKey};

/// ℓ2 distance between two weight vectors of the same layout.
pub fn weight_distance(a: &WeightVector, b: &WeightVector) -> Result<f64> {
    a.same_layout(b)?;
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// `2 k L η / B`.
pub fn theoretical_sensitivity(passes: f64, lipschitz: f64, learning_rate: f64, batch_size: usize) -> f64 {
    2.0 * passes * lipschitz * learning_rate / batch_size as f64
}

/// Fractional pass count `T B / N`.
pub fn passes(steps: usize, batch_size: usize, n: usize) -> f64 {
    steps as f64 * batch_size as f64 / n as f64
}

/// Whole-epoch pass count: every started epoch counts as a full pass.
pub fn passes_stepwise(steps: usize, batch_size: usize, n: usize) -> f64 {
    let per_epoch = (n / batch_size).max(1);
    steps.div_ceil(per_epoch) as f64
}

/// `√(2 ln(1.25/δ)) + 1e-5`.
pub fn gaussian_c(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() + 1e-5)
}

pub fn default_delta(n: usize) -> f64 {
    1.0 / (n as f64 * n as f64)
}

/// An ε estimate. `value` is infinite when the variability is zero but the
/// sensitivity is not; it serializes as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Epsilon {
    pub value: f64,
    /// ε > 1: the Gaussian-mechanism calibration behind it is only valid on (0, 1).
    pub outside_unit_range: bool,
}

impl Epsilon {
    fn new(value: f64) -> Self {
        Epsilon {
            value,
            outside_unit_range: value > 1.0,
        }
    }

    pub fn is_infinite(&self) -> bool {
        self.value.is_infinite()
    }
}

/// `ε = c Δ / σ`.
pub fn compute_epsilon(sensitivity: f64, sigma: f64, delta: f64) -> Result<Epsilon> {
    let c = gaussian_c(delta)?;
    if !(sensitivity >= 0.0) || !(sigma >= 0.0) {
        return Err(Error::invalid("sensitivity and sigma must be nonnegative"));
    }
    if sensitivity == 0.0 {
        return Ok(Epsilon::new(0.0));
    }
    if sigma == 0.0 {
        return Ok(Epsilon::new(f64::INFINITY));
    }
    Ok(Epsilon::new(c * sensitivity / sigma))
}

/// Records of `ids` with the given init mode, as `seed -> dataset id -> record`.
fn by_seed<'a>(
    records: &'a [ExperimentRecord],
    ids: &[String],
    mode: InitMode,
) -> BTreeMap<u64, BTreeMap<&'a str, &'a ExperimentRecord>> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut out: BTreeMap<u64, BTreeMap<&str, &ExperimentRecord>> = BTreeMap::new();
    for r in records {
        if r.key.init_mode == mode && wanted.contains(r.key.dataset_id.as_str()) {
            out.entry(r.key.seed).or_default().insert(&r.key.dataset_id, r);
        }
    }
    out
}

fn weights(r: &ExperimentRecord, step: Option<usize>) -> Result<&WeightVector> {
    r.weights_at(step)
        .ok_or_else(|| Error::MissingRecord(format!("{} has no checkpoint at step {step:?}", r.key)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseDelta {
    pub seed: u64,
    pub a: String,
    pub b: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub theoretical: Option<f64>,
    pub empirical: f64,
    pub pairwise: Vec<PairwiseDelta>,
}

impl SensitivityReport {
    pub fn with_theoretical(mut self, theoretical: Option<f64>) -> Self {
        self.theoretical = theoretical;
        self
    }
}

/// Max over seeds and member pairs of `‖w_{r,a} − w_{r,b}‖`, at `step`
/// (final weights for `None`).
pub fn empirical_sensitivity_at(
    records: &[ExperimentRecord],
    ids: &[String],
    mode: InitMode,
    step: Option<usize>,
) -> Result<SensitivityReport> {
    let mut pairwise = Vec::new();
    for (seed, members) in by_seed(records, ids, mode) {
        let list: Vec<_> = members.into_iter().collect();
        for i in 0..list.len() {
            for j in i + 1..list.len() {
                let value = weight_distance(weights(list[i].1, step)?, weights(list[j].1, step)?)?;
                pairwise.push(PairwiseDelta {
                    seed,
                    a: list[i].0.to_string(),
                    b: list[j].0.to_string(),
                    value,
                });
            }
        }
    }
    if pairwise.is_empty() {
        return Err(Error::Insufficient("no seed has records for two family members".into()));
    }
    let empirical = pairwise.iter().map(|p| p.value).fold(0.0, f64::max);
    Ok(SensitivityReport {
        theoretical: None,
        empirical,
        pairwise,
    })
}

pub fn empirical_sensitivity(
    records: &[ExperimentRecord],
    ids: &[String],
    mode: InitMode,
) -> Result<SensitivityReport> {
    empirical_sensitivity_at(records, ids, mode, None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variability {
    pub per_dataset: BTreeMap<String, f64>,
    pub sigma_i: f64,
}

/// Population stddev of the pooled deviations from the across-seed mean.
pub fn pooled_sigma(ws: &[&WeightVector]) -> Result<f64> {
    if ws.len() < 2 {
        return Err(Error::Insufficient(format!(
            "variability needs at least two seeds, got {}",
            ws.len()
        )));
    }
    let p = ws[0].len();
    for w in ws {
        ws[0].same_layout(w)?;
    }
    let r = ws.len() as f64;
    let mut mean = vec![0.0; p];
    for w in ws {
        for (m, v) in mean.iter_mut().zip(w.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= r);
    let ss: f64 = ws
        .iter()
        .flat_map(|w| w.values().iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)))
        .sum();
    Ok((ss / (r * p as f64)).sqrt())
}

fn group_by_dataset<'a>(
    records: &'a [ExperimentRecord],
    ids: &[String],
    mode: InitMode,
) -> BTreeMap<&'a str, Vec<&'a ExperimentRecord>> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut out: BTreeMap<&str, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        if r.key.init_mode == mode && wanted.contains(r.key.dataset_id.as_str()) {
            out.entry(&r.key.dataset_id).or_default().push(r);
        }
    }
    for v in out.values_mut() {
        v.sort_by_key(|r| r.key.seed);
    }
    out
}

pub fn variability_sigma_at(
    records: &[ExperimentRecord],
    ids: &[String],
    mode: InitMode,
    step: Option<usize>,
) -> Result<Variability> {
    let groups = group_by_dataset(records, ids, mode);
    if groups.is_empty() {
        return Err(Error::Insufficient(format!(
            "no {mode} records for the requested datasets"
        )));
    }
    let mut per_dataset = BTreeMap::new();
    for (id, rs) in groups {
        let ws = rs.iter().map(|r| weights(r, step)).collect::<Result<Vec<_>>>()?;
        let s = pooled_sigma(&ws).map_err(|e| match e {
            Error::Insufficient(m) => Error::Insufficient(format!("{id}: {m}")),
            other => other,
        })?;
        per_dataset.insert(id.to_string(), s);
    }
    let sigma_i = per_dataset.values().copied().fold(f64::INFINITY, f64::min);
    Ok(Variability { per_dataset, sigma_i })
}

pub fn variability_sigma(records: &[ExperimentRecord], ids: &[String], mode: InitMode) -> Result<Variability> {
    variability_sigma_at(records, ids, mode, None)
}

/// Alternative σ summaries, reported for comparison only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaDiagnostics {
    pub dataset_id: String,
    pub pooled: f64,
    /// Mean over coordinates of each coordinate's own population stddev.
    pub per_weight_mean: f64,
    /// Population stddev of `‖w_r‖` across seeds.
    pub norm_std: f64,
}

pub fn sigma_diagnostics(
    records: &[ExperimentRecord],
    ids: &[String],
    mode: InitMode,
) -> Result<Vec<SigmaDiagnostics>> {
    let mut out = Vec::new();
    for (id, rs) in group_by_dataset(records, ids, mode) {
        let ws: Vec<&WeightVector> = rs.iter().map(|r| &r.final_weights).collect();
        let pooled = pooled_sigma(&ws)?;
        let r = ws.len() as f64;
        let p = ws[0].len();
        let per_weight_mean = (0..p)
            .map(|k| population_std(ws.iter().map(|w| w.values()[k])))
            .sum::<f64>()
            / p as f64;
        let norm_std = population_std(ws.iter().map(|w| w.values().iter().map(|v| v * v).sum::<f64>().sqrt()));
        debug_assert!(r >= 2.0);
        out.push(SigmaDiagnostics {
            dataset_id: id.to_string(),
            pooled,
            per_weight_mean,
            norm_std,
        });
    }
    Ok(out)
}

fn population_std(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    (xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseEpsilon {
    pub a: String,
    pub b: String,
    pub local_sensitivity: f64,
    pub local_sigma: f64,
    pub epsilon: Epsilon,
}

/// ε per member pair, from that pair's max distance over seeds and the
/// smaller of the two members' σ.
pub fn pairwise_epsilon(
    records: &[ExperimentRecord],
    ids: &[String],
    mode: InitMode,
    delta: f64,
) -> Result<Vec<PairwiseEpsilon>> {
    let sens = empirical_sensitivity(records, ids, mode)?;
    let var = variability_sigma(records, ids, mode)?;
    let mut local: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for p in &sens.pairwise {
        let e = local.entry((&p.a, &p.b)).or_insert(0.0);
        *e = e.max(p.value);
    }
    local
        .into_iter()
        .map(|((a, b), d)| {
            let sigma = var.per_dataset[a].min(var.per_dataset[b]);
            Ok(PairwiseEpsilon {
                a: a.to_string(),
                b: b.to_string(),
                local_sensitivity: d,
                local_sigma: sigma,
                epsilon: compute_epsilon(d, sigma, delta)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonReport {
    pub delta: f64,
    pub init_mode: InitMode,
    pub sigma_i: f64,
    pub sigmas: BTreeMap<String, f64>,
    pub sensitivity_theoretical: Option<f64>,
    pub sensitivity_empirical: f64,
    pub epsilon_theoretical: Option<Epsilon>,
    pub epsilon_empirical: Epsilon,
    pub pairwise_epsilons: Vec<PairwiseEpsilon>,
}

/// The full per-family ε summary. `theoretical` is the closed-form Δ̂_S when
/// the model admits one.
pub fn epsilon_report(
    records: &[ExperimentRecord],
    ids: &[String],
    mode: InitMode,
    delta: f64,
    theoretical: Option<f64>,
) -> Result<EpsilonReport> {
    let sens = empirical_sensitivity(records, ids, mode)?;
    let var = variability_sigma(records, ids, mode)?;
    Ok(EpsilonReport {
        delta,
        init_mode: mode,
        sigma_i: var.sigma_i,
        epsilon_theoretical: theoretical
            .map(|t| compute_epsilon(t, var.sigma_i, delta))
            .transpose()?,
        epsilon_empirical: compute_epsilon(sens.empirical, var.sigma_i, delta)?,
        pairwise_epsilons: pairwise_epsilon(records, ids, mode, delta)?,
        sigmas: var.per_dataset,
        sensitivity_theoretical: theoretical,
        sensitivity_empirical: sens.empirical,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DeltaKind {
    #[serde(rename = "S")]
    S,
    #[serde(rename = "V_fix")]
    VFix,
    #[serde(rename = "V_vary")]
    VVary,
    #[serde(rename = "S_plus_V")]
    SPlusV,
}

impl DeltaKind {
    pub const ALL: [DeltaKind; 4] = [DeltaKind::S, DeltaKind::VFix, DeltaKind::VVary, DeltaKind::SPlusV];

    pub fn as_str(self) -> &'static str {
        match self {
            DeltaKind::S => "S",
            DeltaKind::VFix => "V_fix",
            DeltaKind::VVary => "V_vary",
            DeltaKind::SPlusV => "S_plus_V",
        }
    }

    /// Kind of a record pair, or `None` for pairs trained under different
    /// init modes (or the same record twice).
    pub fn classify(a: &RecordKey, b: &RecordKey) -> Option<DeltaKind> {
        if a.init_mode != b.init_mode {
            return None;
        }
        match (a.dataset_id == b.dataset_id, a.seed == b.seed) {
            (true, true) => None,
            (true, false) => Some(match a.init_mode {
                InitMode::Fixed => DeltaKind::VFix,
                InitMode::Vary => DeltaKind::VVary,
            }),
            (false, true) => Some(DeltaKind::S),
            (false, false) => Some(DeltaKind::SPlusV),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaSample {
    pub kind: DeltaKind,
    pub value: f64,
    pub a: RecordKey,
    pub b: RecordKey,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `counts.len() + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Freedman–Diaconis bin width, falling back to 50 equal bins when the
    /// rule is degenerate or asks for more than 1000 bins. A zero-width range
    /// gives one bin holding every value.
    pub fn build(values: &[f64]) -> Result<Histogram> {
        if values.is_empty() {
            return Err(Error::Empty("histogram values"));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let (lo, hi) = (s[0], s[s.len() - 1]);
        if hi == lo {
            return Ok(Histogram {
                edges: vec![lo, hi],
                counts: vec![s.len()],
            });
        }
        let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
        let width = 2.0 * iqr / (s.len() as f64).cbrt();
        let bins = if width > 0.0 {
            ((hi - lo) / width).ceil() as usize
        } else {
            0
        };
        let bins = if (1..=1000).contains(&bins) { bins } else { 50 };
        let step = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + step * i as f64 })
            .collect();
        let mut counts = vec![0; bins];
        for v in &s {
            let k = (((v - lo) / step) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Histogram { edges, counts })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}

/// Linear-interpolation quantile of a sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaSummary {
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaDistributions {
    pub summaries: BTreeMap<DeltaKind, DeltaSummary>,
    #[serde(skip)]
    pub samples: Vec<DeltaSample>,
}

impl DeltaDistributions {
    pub fn summary(&self, kind: DeltaKind) -> Result<&DeltaSummary> {
        self.summaries
            .get(&kind)
            .ok_or_else(|| Error::Insufficient(format!("no admissible pairs of kind {}", kind.as_str())))
    }

    pub fn values(&self, kind: DeltaKind) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().filter(move |s| s.kind == kind).map(|s| s.value)
    }
}

/// Classifies every admissible pair among the records of `ids` and summarizes
/// the distances per kind.
pub fn delta_distributions(records: &[ExperimentRecord], ids: &[String]) -> Result<DeltaDistributions> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut rs: Vec<&ExperimentRecord> = records
        .iter()
        .filter(|r| wanted.contains(r.key.dataset_id.as_str()))
        .collect();
    rs.sort_by(|a, b| a.key.cmp(&b.key));
    let samples: Vec<DeltaSample> = (0..rs.len())
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::new();
            for j in i + 1..rs.len() {
                if let Some(kind) = DeltaKind::classify(&rs[i].key, &rs[j].key) {
                    out.push(DeltaSample {
                        kind,
                        value: weight_distance(&rs[i].final_weights, &rs[j].final_weights)?,
                        a: rs[i].key.clone(),
                        b: rs[j].key.clone(),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if samples.is_empty() {
        return Err(Error::Insufficient("no admissible record pairs".into()));
    }
    let mut summaries = BTreeMap::new();
    for kind in DeltaKind::ALL {
        let mut v: Vec<f64> = samples.iter().filter(|s| s.kind == kind).map(|s| s.value).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        summaries.insert(
            kind,
            DeltaSummary {
                count: v.len(),
                min: v[0],
                median: quantile(&v, 0.5),
                max: v[v.len() - 1],
                histogram: Histogram::build(&v)?,
            },
        );
    }
    Ok(DeltaDistributions { summaries, samples })
}

/// Hyperparameters for the closed-form curve. `lipschitz` is `None` for
/// models without a known constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundParams {
    pub lipschitz: Option<f64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityPoint {
    pub step: usize,
    pub empirical: Option<f64>,
    pub sigma_fix: Option<f64>,
    pub sigma_vary: Option<f64>,
    pub theoretical: Option<f64>,
    pub theoretical_stepwise: Option<f64>,
}

/// Δ̂_S*, σ_fix, σ_vary and the closed-form Δ̂_S at every shared checkpoint.
/// The empirical sensitivity uses the records of `mode`.
pub fn stability_vs_steps(
    records: &[ExperimentRecord],
    ids: &[String],
    mode: InitMode,
    bound: BoundParams,
) -> Result<Vec<StabilityPoint>> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let rs: Vec<&ExperimentRecord> = records
        .iter()
        .filter(|r| wanted.contains(r.key.dataset_id.as_str()))
        .collect();
    let first = rs.first().ok_or(Error::Empty("records"))?;
    if rs.iter().any(|r| !r.checkpoints.keys().eq(first.checkpoints.keys())) {
        return Err(Error::ScheduleMismatch);
    }
    let have = |m: InitMode| rs.iter().any(|r| r.key.init_mode == m);
    first
        .checkpoints
        .keys()
        .map(|&step| {
            let sigma = |m: InitMode| -> Result<Option<f64>> {
                if have(m) {
                    Ok(Some(variability_sigma_at(records, ids, m, Some(step))?.sigma_i))
                } else {
                    Ok(None)
                }
            };
            let empirical = if have(mode) {
                Some(empirical_sensitivity_at(records, ids, mode, Some(step))?.empirical)
            } else {
                None
            };
            let th = |k: f64| {
                bound
                    .lipschitz
                    .map(|l| theoretical_sensitivity(k, l, bound.learning_rate, bound.batch_size))
            };
            Ok(StabilityPoint {
                step,
                empirical,
                sigma_fix: sigma(InitMode::Fixed)?,
                sigma_vary: sigma(InitMode::Vary)?,
                theoretical: th(passes(step, bound.batch_size, bound.n)),
                theoretical_stepwise: th(passes_stepwise(step, bound.batch_size, bound.n)),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergencePoint {
    pub seeds_used: usize,
    pub experiments: usize,
    pub empirical: f64,
    /// `None` below two seeds.
    pub sigma_i: Option<f64>,
}

/// Estimates recomputed on growing seed subsets. Seeds are shuffled once from
/// `resample_seed` and each subset is a prefix of that order, so the subsets
/// form an inclusion chain.
pub fn estimate_convergence(
    records: &[ExperimentRecord],
    ids: &[String],
    mode: InitMode,
    sizes: &[usize],
    resample_seed: u64,
) -> Result<Vec<ConvergencePoint>> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut seeds: Vec<u64> = records
        .iter()
        .filter(|r| r.key.init_mode == mode && wanted.contains(r.key.dataset_id.as_str()))
        .map(|r| r.key.seed)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    seeds.shuffle(&mut derive_stream(resample_seed, TAG_RESAMPLE));
    sizes
        .iter()
        .map(|&size| {
            if size == 0 || size > seeds.len() {
                return Err(Error::invalid(format!(
                    "subset size {size} outside 1..={}",
                    seeds.len()
                )));
            }
            let keep: BTreeSet<u64> = seeds[..size].iter().copied().collect();
            let subset: Vec<ExperimentRecord> = records
                .iter()
                .filter(|r| {
                    r.key.init_mode == mode && keep.contains(&r.key.seed) && wanted.contains(r.key.dataset_id.as_str())
                })
                .cloned()
                .collect();
            let empirical = empirical_sensitivity(&subset, ids, mode)?.empirical;
            let sigma_i = if size >= 2 {
                Some(variability_sigma(&subset, ids, mode)?.sigma_i)
            } else {
                None
            };
            Ok(ConvergencePoint {
                seeds_used: size,
                experiments: subset.len(),
                empirical,
                sigma_i,
            })
        })
        .collect()
}
