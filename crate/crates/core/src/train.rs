//! Seeded minibatch SGD.
//!
//! Each epoch draws a fresh permutation from the run's shuffle stream; batches
//! are consecutive blocks of `batch_size` positions, and the incomplete trailing
//! block of every epoch is dropped.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetInstance;
use crate::error::{Error, Result};
use crate::model::{self, init_weights, InitMode, ModelSpec, WeightVector};
use crate::rng::{derive_stream, Stream, TAG_SHUFFLE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub checkpoint_steps: Vec<usize>,
    /// Metric cadence in steps; 0 disables metrics.
    #[serde(default)]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, batch_size: usize, total_steps: usize) -> Self {
        Self {
            learning_rate,
            batch_size,
            total_steps,
            checkpoint_steps: vec![total_steps],
            eval_every: 0,
        }
    }

    pub fn with_checkpoints(mut self, steps: impl IntoIterator<Item = usize>) -> Self {
        let mut steps: Vec<usize> = steps.into_iter().collect();
        steps.sort_unstable();
        steps.dedup();
        self.checkpoint_steps = steps;
        self
    }

    pub fn with_eval_every(mut self, every: usize) -> Self {
        self.eval_every = every;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.checkpoint_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("checkpoint steps must be strictly increasing"));
        }
        if let Some(&last) = self.checkpoint_steps.last() {
            if last > self.total_steps {
                return Err(Error::invalid(format!(
                    "checkpoint {last} beyond total steps {}",
                    self.total_steps
                )));
            }
        }
        Ok(())
    }

    /// Full passes over `n` rows: `T·B/N`.
    pub fn passes(&self, n: usize) -> f64 {
        self.total_steps as f64 * self.batch_size as f64 / n as f64
    }
}

/// Identity of one run within a grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub dataset_id: String,
    pub seed: u64,
    pub init_mode: InitMode,
}

impl std::fmt::Display for RecordKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}:{}", self.dataset_id, self.seed, self.init_mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub key: RecordKey,
    pub spec: ModelSpec,
    pub final_weights: WeightVector,
    pub checkpoints: BTreeMap<usize, WeightVector>,
    pub metrics: BTreeMap<usize, StepMetrics>,
    pub config_digest: String,
}

impl ExperimentRecord {
    /// Weights at a checkpoint, or the final weights for `None`.
    pub fn weights_at(&self, step: Option<usize>) -> Option<&WeightVector> {
        match step {
            None => Some(&self.final_weights),
            Some(t) => self.checkpoints.get(&t),
        }
    }
}

/// Digest of everything that determines a run's output besides seed and mode.
pub fn config_digest(spec: &ModelSpec, cfg: &TrainConfig, data: &DatasetInstance) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("serializable"));
    h.update(serde_json::to_vec(cfg).expect("serializable"));
    h.update((data.n() as u64).to_le_bytes());
    h.update((data.d() as u64).to_le_bytes());
    for v in data.features().iter() {
        h.update(v.to_le_bytes());
    }
    h.update(data.labels());
    let out = h.finalize();
    out.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Sequence of minibatches for one seed: a fresh permutation per epoch,
/// trailing partial block dropped.
pub struct BatchSchedule {
    rng: Stream,
    perm: Vec<usize>,
    batch_size: usize,
    per_epoch: usize,
    cursor: usize,
    epoch: usize,
}

impl BatchSchedule {
    pub fn new(master_seed: u64, n: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::invalid(format!("batch size {batch_size} must be in 1..={n}")));
        }
        Ok(Self {
            rng: derive_stream(master_seed, TAG_SHUFFLE),
            perm: (0..n).collect(),
            batch_size,
            per_epoch: n / batch_size,
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.per_epoch
    }

    /// Epochs started so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Next batch of row positions.
    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor == 0 {
            // Each epoch shuffles the identity, so permutations are independent draws.
            for (i, p) in self.perm.iter_mut().enumerate() {
                *p = i;
            }
            self.perm.shuffle(&mut self.rng);
            self.epoch += 1;
        }
        let start = self.cursor * self.batch_size;
        self.cursor = (self.cursor + 1) % self.per_epoch;
        &self.perm[start..start + self.batch_size]
    }

    /// The first `steps` batches, materialized.
    pub fn take(mut self, steps: usize) -> Vec<Vec<usize>> {
        (0..steps).map(|_| self.next_batch().to_vec()).collect()
    }
}

/// First update (0-based) whose batch touches any of `positions`.
pub fn first_batch_containing(
    master_seed: u64,
    n: usize,
    batch_size: usize,
    positions: &[usize],
    max_steps: usize,
) -> Result<Option<usize>> {
    let mut sched = BatchSchedule::new(master_seed, n, batch_size)?;
    for t in 0..max_steps {
        if sched.next_batch().iter().any(|p| positions.contains(p)) {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// Loss and accuracy; predictions with `p >= 0.5` count as class 1.
pub fn evaluate(spec: &ModelSpec, w: &WeightVector, data: &DatasetInstance) -> Result<(f64, f64)> {
    if data.n() == 0 {
        return Err(Error::Empty("dataset"));
    }
    let loss = model::loss(spec, w, data.features().view(), data.labels())?;
    let mut correct = 0usize;
    for (i, &y) in data.labels().iter().enumerate() {
        let p = model::forward(spec, w, data.row(i))?;
        if u8::from(p >= 0.5) == y {
            correct += 1;
        }
    }
    Ok((loss, correct as f64 / data.n() as f64))
}

pub fn accuracy(spec: &ModelSpec, w: &WeightVector, data: &DatasetInstance) -> Result<f64> {
    let mut correct = 0usize;
    for (i, &y) in data.labels().iter().enumerate() {
        if u8::from(model::forward(spec, w, data.row(i))? >= 0.5) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.n().max(1) as f64)
}

/// Arguments of one SGD run.
#[derive(Debug, Clone, Copy)]
pub struct SgdRun<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a DatasetInstance,
    pub config: &'a TrainConfig,
    pub seed: u64,
    pub init_mode: InitMode,
    pub fixed_init: Option<&'a WeightVector>,
    pub validation: Option<&'a DatasetInstance>,
}

pub fn run_sgd(
    spec: &ModelSpec,
    data: &DatasetInstance,
    cfg: &TrainConfig,
    master_seed: u64,
    init_mode: InitMode,
    fixed_init: Option<&WeightVector>,
) -> Result<ExperimentRecord> {
    SgdRun {
        spec,
        data,
        config: cfg,
        seed: master_seed,
        init_mode,
        fixed_init,
        validation: None,
    }
    .run()
}

impl SgdRun<'_> {
    pub fn run(&self) -> Result<ExperimentRecord> {
        let (spec, data, cfg) = (self.spec, self.data, self.config);
        spec.validate()?;
        cfg.validate()?;
        if data.d() != spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: spec.input_dim,
                found: data.d(),
            });
        }
        let mut sched = BatchSchedule::new(self.seed, data.n(), cfg.batch_size)?;
        let mut w = match self.fixed_init {
            Some(w0) => {
                if w0.len() != spec.param_count() {
                    return Err(Error::DimensionMismatch {
                        expected: spec.param_count(),
                        found: w0.len(),
                    });
                }
                w0.clone()
            }
            None => init_weights(spec, self.seed, self.init_mode),
        };
        let mut grad = vec![0.0; w.len()];
        let mut hidden = vec![0.0; spec.hidden_size.unwrap_or(0)];
        let mut checkpoints = BTreeMap::new();
        let mut metrics = BTreeMap::new();
        let mut next_ckpt = cfg.checkpoint_steps.iter().copied().peekable();

        for step in 0..=cfg.total_steps {
            if step > 0 {
                let batch = sched.next_batch();
                model::gradient_indexed(spec, w.values(), data, batch, &mut hidden, &mut grad);
                let eta = cfg.learning_rate;
                for (wi, gi) in w.values_mut().iter_mut().zip(&grad) {
                    *wi -= eta * gi;
                }
                if w.values().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { step });
                }
            }
            if next_ckpt.peek() == Some(&step) {
                next_ckpt.next();
                checkpoints.insert(step, w.clone());
            }
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                let (loss, accuracy) = evaluate(spec, &w, data)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite { step });
                }
                let (val_loss, val_accuracy) = match self.validation {
                    Some(v) if v.n() > 0 => {
                        let (l, a) = evaluate(spec, &w, v)?;
                        (Some(l), Some(a))
                    }
                    _ => (None, None),
                };
                metrics.insert(
                    step,
                    StepMetrics {
                        loss,
                        accuracy,
                        val_loss,
                        val_accuracy,
                    },
                );
            }
        }

        Ok(ExperimentRecord {
            key: RecordKey {
                dataset_id: data.source_id().to_string(),
                seed: self.seed,
                init_mode: self.init_mode,
            },
            spec: *spec,
            final_weights: w,
            checkpoints,
            metrics,
            config_digest: config_digest(spec, cfg, data),
        })
    }
}

/// Smallest checkpointed step at which the two runs' weights differ bitwise.
pub fn divergence_step(a: &ExperimentRecord, b: &ExperimentRecord) -> Result<Option<usize>> {
    if a.spec != b.spec || !a.checkpoints.keys().eq(b.checkpoints.keys()) {
        return Err(Error::ScheduleMismatch);
    }
    for ((step, wa), wb) in a.checkpoints.iter().zip(b.checkpoints.values()) {
        if !wa.bit_eq(wb) {
            return Ok(Some(*step));
        }
    }
    Ok(None)
}

/// Early-stopping recommendation from recorded validation loss: the best step
/// seen before `patience` consecutive evaluations failed to improve on it.
pub fn recommend_stopping(record: &ExperimentRecord, patience: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    let mut misses = 0;
    for (&step, m) in &record.metrics {
        let val = m.val_loss?;
        match best {
            Some((_, b)) if val >= b => {
                misses += 1;
                if misses >= patience {
                    break;
                }
            }
            _ => {
                best = Some((step, val));
                misses = 0;
            }
        }
    }
    best.map(|(s, _)| s)
}
