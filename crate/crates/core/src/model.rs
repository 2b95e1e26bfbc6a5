//! Logistic regression and one-hidden-layer MLP with closed-form gradients.
//!
//! Flat parameter layouts:
//! - logreg: `[weights (d), bias]`
//! - mlp: `[W (hidden × d, row-major), b (hidden), v (hidden), c]`

use std::io::{Read, Write};

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetInstance;
use crate::error::{Error, Result};
use crate::rng::{derive_stream, TAG_INIT};

/// Probability clamp used inside the loss.
pub const LOSS_CLAMP: f64 = 1e-12;

/// Seed used for initialisation when the init mode is [`InitMode::Fixed`].
pub const FIXED_INIT_SEED: u64 = 0x5eed_f1ed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_size: Option<usize>,
}

impl ModelSpec {
    pub fn logreg(input_dim: usize) -> Self {
        Self {
            kind: ModelKind::Logreg,
            input_dim,
            hidden_size: None,
        }
    }

    pub fn mlp(input_dim: usize, hidden_size: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_size: Some(hidden_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("model input dimension must be positive"));
        }
        match (self.kind, self.hidden_size) {
            (ModelKind::Logreg, None) => Ok(()),
            (ModelKind::Mlp, Some(h)) if h > 0 => Ok(()),
            (ModelKind::Logreg, Some(_)) => Err(Error::invalid("logreg takes no hidden_size")),
            (ModelKind::Mlp, _) => Err(Error::invalid("mlp needs a positive hidden_size")),
        }
    }

    fn hidden(&self) -> usize {
        self.hidden_size.unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        let d = self.input_dim;
        match self.kind {
            ModelKind::Logreg => d + 1,
            ModelKind::Mlp => {
                let h = self.hidden();
                h * d + 2 * h + 1
            }
        }
    }

    pub fn layout(&self) -> Layout {
        let d = self.input_dim;
        let mut slots = Vec::new();
        let mut push = |name: &'static str, shape: Vec<usize>| {
            let offset = slots.last().map_or(0, |s: &TensorSlot| s.offset + s.len());
            slots.push(TensorSlot { name, shape, offset });
        };
        match self.kind {
            ModelKind::Logreg => {
                push("weights", vec![d]);
                push("bias", vec![1]);
            }
            ModelKind::Mlp => {
                let h = self.hidden();
                push("W", vec![h, d]);
                push("b", vec![h]);
                push("v", vec![h]);
                push("c", vec![1]);
            }
        }
        Layout { slots }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_bias(&self) -> bool {
        matches!(self.name, "bias" | "b" | "c")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub slots: Vec<TensorSlot>,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.slots.iter().map(TensorSlot::len).sum()
    }

    pub fn slot(&self, name: &str) -> Option<&TensorSlot> {
        self.slots.iter().find(|s| s.name == name)
    }
}

/// Flat parameter vector together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    values: Vec<f64>,
    layout: Layout,
}

impl WeightVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        }
    }

    /// Re-attaches a layout to a flat vector.
    pub fn from_flat(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        let layout = spec.layout();
        if values.len() != layout.total() {
            return Err(Error::DimensionMismatch {
                expected: layout.total(),
                found: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.slot(name).map(|s| &self.values[s.range()])
    }

    pub fn same_layout(&self, other: &Self) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(())
    }

    /// Bitwise equality of every coordinate.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Fixed,
    Vary,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Fixed => "fixed",
            InitMode::Vary => "vary",
        }
    }
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(InitMode::Fixed),
            "vary" => Ok(InitMode::Vary),
            _ => Err(Error::invalid(format!("unknown init mode {s:?}"))),
        }
    }
}

/// Glorot-uniform matrices, zero biases. `Fixed` ignores `seed`.
pub fn init_weights(spec: &ModelSpec, seed: u64, mode: InitMode) -> WeightVector {
    let stream_seed = match mode {
        InitMode::Fixed => FIXED_INIT_SEED,
        InitMode::Vary => seed,
    };
    let mut rng = derive_stream(stream_seed, TAG_INIT);
    let mut w = WeightVector::zeros(spec);
    let d = spec.input_dim;
    let h = spec.hidden();
    let fans: Vec<(&str, usize, usize)> = match spec.kind {
        ModelKind::Logreg => vec![("weights", d, 1)],
        ModelKind::Mlp => vec![("W", d, h), ("v", h, 1)],
    };
    for (name, fan_in, fan_out) in fans {
        let limit = glorot_limit(fan_in, fan_out);
        let range = w.layout.slot(name).expect("slot exists").range();
        for v in &mut w.values[range] {
            *v = rng.random_range(-limit..=limit);
        }
    }
    w
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check(spec: &ModelSpec, w: &WeightVector, d: usize) -> Result<()> {
    if w.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.param_count(),
            found: w.len(),
        });
    }
    if d != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            found: d,
        });
    }
    Ok(())
}

/// Output logit; `hidden` receives the post-relu activations for the MLP.
fn logit(spec: &ModelSpec, w: &[f64], x: ArrayView1<f64>, hidden: &mut [f64]) -> f64 {
    let d = spec.input_dim;
    match spec.kind {
        ModelKind::Logreg => {
            let mut z = w[d];
            for (wj, xj) in w[..d].iter().zip(x.iter()) {
                z += wj * xj;
            }
            z
        }
        ModelKind::Mlp => {
            let h = spec.hidden();
            let (wm, rest) = w.split_at(h * d);
            let (b, rest) = rest.split_at(h);
            let (v, c) = rest.split_at(h);
            let mut z = c[0];
            for k in 0..h {
                let mut pre = b[k];
                for (wkj, xj) in wm[k * d..(k + 1) * d].iter().zip(x.iter()) {
                    pre += wkj * xj;
                }
                let a = pre.max(0.0);
                hidden[k] = a;
                z += v[k] * a;
            }
            z
        }
    }
}

pub fn forward(spec: &ModelSpec, w: &WeightVector, x: ArrayView1<f64>) -> Result<f64> {
    check(spec, w, x.len())?;
    let mut hidden = vec![0.0; spec.hidden()];
    Ok(sigmoid(logit(spec, &w.values, x, &mut hidden)))
}

fn bce(p: f64, y: u8) -> f64 {
    let p = p.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn check_batch(features: ArrayView2<f64>, labels: &[u8]) -> Result<()> {
    if features.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != features.nrows() {
        return Err(Error::DimensionMismatch {
            expected: features.nrows(),
            found: labels.len(),
        });
    }
    Ok(())
}

/// Mean binary cross-entropy.
pub fn loss(spec: &ModelSpec, w: &WeightVector, features: ArrayView2<f64>, labels: &[u8]) -> Result<f64> {
    check_batch(features, labels)?;
    check(spec, w, features.ncols())?;
    let mut hidden = vec![0.0; spec.hidden()];
    let total: f64 = features
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(x, &y)| bce(sigmoid(logit(spec, &w.values, x, &mut hidden)), y))
        .sum();
    Ok(total / features.nrows() as f64)
}

/// Adds the gradient of one example's loss, scaled by `scale`, into `grad`.
fn accumulate_gradient(
    spec: &ModelSpec,
    w: &[f64],
    x: ArrayView1<f64>,
    y: u8,
    scale: f64,
    hidden: &mut [f64],
    grad: &mut [f64],
) {
    let d = spec.input_dim;
    let z = logit(spec, w, x, hidden);
    let err = (sigmoid(z) - f64::from(y)) * scale;
    match spec.kind {
        ModelKind::Logreg => {
            for (g, xj) in grad[..d].iter_mut().zip(x.iter()) {
                *g += err * xj;
            }
            grad[d] += err;
        }
        ModelKind::Mlp => {
            let h = spec.hidden();
            let v_off = h * d + h;
            for k in 0..h {
                let a = hidden[k];
                grad[v_off + k] += err * a;
                if a > 0.0 {
                    let dpre = err * w[v_off + k];
                    for (g, xj) in grad[k * d..(k + 1) * d].iter_mut().zip(x.iter()) {
                        *g += dpre * xj;
                    }
                    grad[h * d + k] += dpre;
                }
            }
            grad[v_off + h] += err;
        }
    }
}

/// Exact gradient of the mean loss over the batch.
pub fn gradient(spec: &ModelSpec, w: &WeightVector, features: ArrayView2<f64>, labels: &[u8]) -> Result<WeightVector> {
    check_batch(features, labels)?;
    check(spec, w, features.ncols())?;
    let mut grad = WeightVector::zeros(spec);
    let mut hidden = vec![0.0; spec.hidden()];
    let scale = 1.0 / features.nrows() as f64;
    for (x, &y) in features.rows().into_iter().zip(labels) {
        accumulate_gradient(spec, &w.values, x, y, scale, &mut hidden, &mut grad.values);
    }
    Ok(grad)
}

/// Gradient over the rows of `data` at `indices`, written into `grad` (which is
/// overwritten). Used by the training loop to avoid gathering batches.
pub(crate) fn gradient_indexed(
    spec: &ModelSpec,
    w: &[f64],
    data: &DatasetInstance,
    indices: &[usize],
    hidden: &mut [f64],
    grad: &mut [f64],
) {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let scale = 1.0 / indices.len() as f64;
    for &i in indices {
        accumulate_gradient(spec, w, data.row(i), data.labels()[i], scale, hidden, grad);
    }
}

/// Lipschitz and smoothness constants of the per-example loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConstants {
    pub lipschitz: Option<f64>,
    /// `sup ‖(x, 1)‖²`, the bias-augmented input.
    pub smoothness: Option<f64>,
    /// `sup ‖x‖²`, ignoring the bias coordinate.
    pub smoothness_without_bias: Option<f64>,
}

/// For logreg with `‖x‖ ≤ r`: `L = √(r² + 1)`. None for the MLP.
pub fn loss_constants(spec: &ModelSpec, norm_bound: f64) -> LossConstants {
    match spec.kind {
        ModelKind::Logreg => {
            let r2 = norm_bound * norm_bound;
            LossConstants {
                lipschitz: Some((r2 + 1.0).sqrt()),
                smoothness: Some(r2 + 1.0),
                smoothness_without_bias: Some(r2),
            }
        }
        ModelKind::Mlp => LossConstants {
            lipschitz: None,
            smoothness: None,
            smoothness_without_bias: None,
        },
    }
}

pub const WEIGHT_MAGIC: &[u8; 4] = b"SGDW";
pub const WEIGHT_VERSION: u8 = 1;

/// `"SGDW"`, version byte, u32 LE count, then f64 LE values.
pub fn encode_weights(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 8 * values.len());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.push(WEIGHT_VERSION);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 9 {
        return Err(Error::CorruptWeights(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != WEIGHT_MAGIC {
        return Err(Error::CorruptWeights("bad magic".into()));
    }
    if bytes[4] != WEIGHT_VERSION {
        return Err(Error::CorruptWeights(format!("unsupported version {}", bytes[4])));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = &bytes[9..];
    if body.len() != 8 * count {
        return Err(Error::CorruptWeights(format!(
            "header says {count} values, payload holds {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn write_weights(w: &WeightVector, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(&encode_weights(&w.values))
}

pub fn read_weights(spec: &ModelSpec, mut input: impl Read) -> Result<WeightVector> {
    let mut buf = Vec::new();
    input
        .read_to_end(&mut buf)
        .map_err(|e| Error::CorruptWeights(e.to_string()))?;
    WeightVector::from_flat(spec, decode_weights(&buf)?)
}
