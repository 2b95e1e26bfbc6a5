//! Grid configuration, the on-disk result store, grid execution and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    default_delta, delta_distributions, epsilon_report, estimate_convergence, passes, stability_vs_steps,
    theoretical_sensitivity, BoundParams, DeltaKind, EpsilonReport,
};
use crate::data::{
    central_crop_indices, generate_synthetic, grp_project, load_csv, make_neighbour_family, select_features,
    DatasetInstance, MaxNormScaler, NeighbourFamily, PcaProjection, SplitIndices, SplitSpec,
};
use crate::error::{Error, Result};
use crate::model::{decode_weights, encode_weights, loss_constants, InitMode, ModelKind, ModelSpec, WeightVector};
use crate::privacy::{compare_utilities, UtilityInputs, DEFAULT_SIGNIFICANCE};
use crate::rng::derive_stream;
use crate::stats::normality_sweep;
use crate::train::{ExperimentRecord, RecordKey, SgdRun, StepMetrics, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;
const RECORDS_FILE: &str = "records.jsonl";
const WEIGHTS_DIR: &str = "weights";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n: usize,
        d: usize,
        separation: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Preprocess {
    /// Principal components fitted on the training rows.
    Pca {
        components: usize,
    },
    /// Gaussian random projection.
    Grp {
        components: usize,
        seed: u64,
    },
    Select {
        indices: Vec<usize>,
    },
    /// Central `crop × crop` window of a row-major `width × height` image.
    Crop {
        width: usize,
        height: usize,
        crop: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    /// Scale fitted on every row.
    #[default]
    Full,
    /// Scale fitted on the training rows only.
    Train,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_size: Option<usize>,
}

fn default_name() -> String {
    "grid".into()
}

fn default_epsilons() -> Vec<f64> {
    vec![0.5, 1.0]
}

fn default_modes() -> Vec<InitMode> {
    vec![InitMode::Vary]
}

fn default_significance() -> f64 {
    DEFAULT_SIGNIFICANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataSource,
    #[serde(default)]
    pub preprocess: Vec<Preprocess>,
    #[serde(default)]
    pub normalize: Normalize,
    #[serde(default)]
    pub split: SplitSpec,
    /// Rows of the training partition replaced in turn (1-based, row 0 is the
    /// replacement).
    pub members: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_modes")]
    pub init_modes: Vec<InitMode>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Overrides the default `1/N²`.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub report_seed: u64,
    #[serde(default = "default_significance")]
    pub significance: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl GridConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: GridConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Csv { path: p, .. } = &mut cfg.data {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seed list has duplicates".into());
        }
        if self.members.is_empty() {
            return bad("member list is empty".into());
        }
        if self.members.iter().collect::<BTreeSet<_>>().len() != self.members.len() {
            return bad("member list has duplicates".into());
        }
        if self.members.contains(&0) {
            return bad("member index 0 is the replacement row".into());
        }
        if self.init_modes.is_empty() || self.init_modes.iter().collect::<BTreeSet<_>>().len() != self.init_modes.len()
        {
            return bad("init_modes must be nonempty and duplicate-free".into());
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return bad(format!("delta must lie in (0, 1), got {d}"));
            }
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0)) {
            return bad("epsilons must be positive".into());
        }
        match (self.model.kind, self.model.hidden_size) {
            (ModelKind::Mlp, None | Some(0)) => return bad("mlp needs hidden_size >= 1".into()),
            (ModelKind::Logreg, Some(_)) => return bad("logreg takes no hidden_size".into()),
            _ => {}
        }
        self.split.validate()?;
        self.train.validate()
    }
}

/// Data after splitting, preprocessing and normalization, with the family
/// built on the training partition.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SplitIndices,
    pub train: DatasetInstance,
    pub validation: DatasetInstance,
    pub test: DatasetInstance,
    pub family: NeighbourFamily,
    pub spec: ModelSpec,
}

impl Prepared {
    pub fn member_ids(&self) -> Vec<String> {
        self.family.member_ids()
    }

    /// `N`, the size of every family member.
    pub fn n(&self) -> usize {
        self.family.member_size()
    }

    pub fn delta(&self, cfg: &GridConfig) -> f64 {
        cfg.delta.unwrap_or_else(|| default_delta(self.n()))
    }

    /// Closed-form Δ̂_S for the configured run, when the model has a Lipschitz constant.
    pub fn theoretical_sensitivity(&self, cfg: &GridConfig) -> Option<f64> {
        let l = loss_constants(&self.spec, self.family.base().norm_bound()).lipschitz?;
        let k = passes(cfg.train.total_steps, cfg.train.batch_size, self.n());
        Some(theoretical_sensitivity(
            k,
            l,
            cfg.train.learning_rate,
            cfg.train.batch_size,
        ))
    }

    pub fn bound_params(&self, cfg: &GridConfig) -> BoundParams {
        BoundParams {
            lipschitz: loss_constants(&self.spec, self.family.base().norm_bound()).lipschitz,
            learning_rate: cfg.train.learning_rate,
            batch_size: cfg.train.batch_size,
            n: self.n(),
        }
    }
}

pub fn load_source(src: &DataSource) -> Result<DatasetInstance> {
    match src {
        DataSource::Synthetic { n, d, separation, seed } => generate_synthetic(*n, *d, *separation, *seed),
        DataSource::Csv { path, label_column } => load_csv(path, label_column),
    }
}

pub fn prepare(cfg: &GridConfig) -> Result<Prepared> {
    let raw = load_source(&cfg.data)?;
    let split = cfg.split.split(raw.n())?;
    let mut data = raw;
    for step in &cfg.preprocess {
        data = match step {
            Preprocess::Pca { components } => PcaProjection::fit(&data, *components, &split.train)?.apply(&data)?,
            Preprocess::Grp { components, seed } => grp_project(&data, *components, *seed)?,
            Preprocess::Select { indices } => select_features(&data, indices)?,
            Preprocess::Crop { width, height, crop } => {
                if width * height != data.d() {
                    return Err(Error::Config(format!(
                        "crop expects {width}x{height} = {} features, data has {}",
                        width * height,
                        data.d()
                    )));
                }
                select_features(&data, &central_crop_indices(*width, *height, *crop)?)?
            }
        };
    }
    let part = |rows: &[usize], tag: &str| data.subset(rows, format!("{}/{tag}", cfg.name));
    let (train, validation, test) = (
        part(&split.train, "train")?,
        part(&split.validation, "validation")?,
        part(&split.test, "test")?,
    );
    let (train, validation, test) = match cfg.normalize {
        Normalize::None => (train, validation, test),
        mode => {
            let scaler = MaxNormScaler::fit(if mode == Normalize::Full { &data } else { &train })?;
            (scaler.apply(&train), scaler.apply(&validation), scaler.apply(&test))
        }
    };
    let base = train.clone().with_source_id(cfg.name.clone());
    for &m in &cfg.members {
        if m >= base.n() {
            return Err(Error::Config(format!(
                "member index {m} outside the {}-row training partition",
                base.n()
            )));
        }
    }
    let family = make_neighbour_family(&base, &cfg.members)?;
    let spec = ModelSpec {
        kind: cfg.model.kind,
        input_dim: base.d(),
        hidden_size: cfg.model.hidden_size,
    };
    spec.validate()?;
    if cfg.train.batch_size > family.member_size() {
        return Err(Error::Config(format!(
            "batch size {} exceeds member size {}",
            cfg.train.batch_size,
            family.member_size()
        )));
    }
    Ok(Prepared {
        split,
        train,
        validation,
        test,
        family,
        spec,
    })
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    dataset_id: String,
    seed: u64,
    init_mode: InitMode,
    config_digest: String,
    spec: ModelSpec,
    weights: String,
    checkpoints: String,
    checkpoint_steps: Vec<usize>,
    metrics: BTreeMap<usize, StepMetrics>,
}

fn file_stem(key: &RecordKey) -> String {
    let clean: String = key
        .dataset_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    let h = Sha256::digest(key.to_string().as_bytes());
    let tag: String = h.iter().take(4).map(|b| format!("{b:02x}")).collect();
    format!("{clean}__{}__{}__{tag}", key.seed, key.init_mode)
}

/// Splits a file of concatenated weight blobs.
fn decode_many(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        if rest.len() < 9 {
            return Err(Error::CorruptWeights("truncated header".into()));
        }
        let count = u32::from_le_bytes(rest[5..9].try_into().expect("4 bytes")) as usize;
        let len = 9 + 8 * count;
        if rest.len() < len {
            return Err(Error::CorruptWeights(format!(
                "expected {len} bytes, found {}",
                rest.len()
            )));
        }
        out.push(decode_weights(&rest[..len])?);
        rest = &rest[len..];
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Records keyed by `(dataset id, seed, init mode)`, each tagged with its
/// config digest. Optionally backed by a directory.
#[derive(Debug, Clone, Default)]
pub struct ResultStore {
    dir: Option<PathBuf>,
    records: BTreeMap<RecordKey, ExperimentRecord>,
    pending: BTreeSet<RecordKey>,
}

impl ResultStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a store directory and loads every record.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join(WEIGHTS_DIR)).map_err(|e| Error::io(&dir, e))?;
        let mut store = ResultStore {
            dir: Some(dir.clone()),
            ..Default::default()
        };
        let path = dir.join(RECORDS_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let rec: RecordLine = serde_json::from_str(line)?;
                let r = read_record(&dir, rec)?;
                store.records.insert(r.key.clone(), r);
            }
        }
        Ok(store)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &RecordKey> {
        self.records.keys()
    }

    pub fn records(&self) -> impl Iterator<Item = &ExperimentRecord> {
        self.records.values()
    }

    /// Snapshot in key order.
    pub fn to_vec(&self) -> Vec<ExperimentRecord> {
        self.records.values().cloned().collect()
    }

    pub fn get(&self, key: &RecordKey) -> Result<&ExperimentRecord> {
        self.records
            .get(key)
            .ok_or_else(|| Error::MissingRecord(key.to_string()))
    }

    /// Whether `key` is already present under `digest`. A different digest is
    /// an error.
    pub fn contains(&self, key: &RecordKey, digest: &str) -> Result<bool> {
        match self.records.get(key) {
            None => Ok(false),
            Some(r) if r.config_digest == digest => Ok(true),
            Some(r) => Err(Error::DigestMismatch {
                key: key.to_string(),
                existing: r.config_digest.clone(),
                requested: digest.to_string(),
            }),
        }
    }

    /// Adds a record; returns false when an identical-digest record exists.
    pub fn insert(&mut self, record: ExperimentRecord) -> Result<bool> {
        if self.contains(&record.key, &record.config_digest)? {
            return Ok(false);
        }
        self.pending.insert(record.key.clone());
        self.records.insert(record.key.clone(), record);
        Ok(true)
    }

    /// Writes pending weight files and rewrites the record index in key order.
    pub fn commit(&mut self) -> Result<()> {
        let Some(dir) = self.dir.clone() else {
            self.pending.clear();
            return Ok(());
        };
        for key in std::mem::take(&mut self.pending) {
            let r = &self.records[&key];
            let stem = file_stem(&key);
            write_atomic(
                &dir.join(WEIGHTS_DIR).join(format!("{stem}.sgdw")),
                &encode_weights(r.final_weights.values()),
            )?;
            let mut blob = Vec::new();
            for w in r.checkpoints.values() {
                blob.extend(encode_weights(w.values()));
            }
            write_atomic(&dir.join(WEIGHTS_DIR).join(format!("{stem}.ckpt.sgdw")), &blob)?;
        }
        let mut index = String::new();
        for (key, r) in &self.records {
            let stem = file_stem(key);
            let line = RecordLine {
                dataset_id: key.dataset_id.clone(),
                seed: key.seed,
                init_mode: key.init_mode,
                config_digest: r.config_digest.clone(),
                spec: r.spec,
                weights: format!("{WEIGHTS_DIR}/{stem}.sgdw"),
                checkpoints: format!("{WEIGHTS_DIR}/{stem}.ckpt.sgdw"),
                checkpoint_steps: r.checkpoints.keys().copied().collect(),
                metrics: r.metrics.clone(),
            };
            index.push_str(&serde_json::to_string(&line)?);
            index.push('\n');
        }
        write_atomic(&dir.join(RECORDS_FILE), index.as_bytes())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_record(dir: &Path, line: RecordLine) -> Result<ExperimentRecord> {
    let key = RecordKey {
        dataset_id: line.dataset_id,
        seed: line.seed,
        init_mode: line.init_mode,
    };
    let final_weights = WeightVector::from_flat(&line.spec, decode_weights(&read_file(&dir.join(&line.weights))?)?)
        .map_err(|e| Error::CorruptWeights(format!("{key}: {e}")))?;
    let blobs = decode_many(&read_file(&dir.join(&line.checkpoints))?)?;
    if blobs.len() != line.checkpoint_steps.len() {
        return Err(Error::CorruptWeights(format!(
            "{key}: {} checkpoints listed, {} stored",
            line.checkpoint_steps.len(),
            blobs.len()
        )));
    }
    let checkpoints = line
        .checkpoint_steps
        .iter()
        .zip(blobs)
        .map(|(&s, v)| {
            Ok((
                s,
                WeightVector::from_flat(&line.spec, v).map_err(|e| Error::CorruptWeights(e.to_string()))?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentRecord {
        key,
        spec: line.spec,
        final_weights,
        checkpoints,
        metrics: line.metrics,
        config_digest: line.config_digest,
    })
}

/// Reads a single record from a store directory.
pub fn load_record(dir: impl AsRef<Path>, key: &RecordKey) -> Result<ExperimentRecord> {
    let dir = dir.as_ref();
    let path = dir.join(RECORDS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for l in text.lines().filter(|l| !l.trim().is_empty()) {
        let line: RecordLine = serde_json::from_str(l)?;
        if line.dataset_id == key.dataset_id && line.seed == key.seed && line.init_mode == key.init_mode {
            return read_record(dir, line);
        }
    }
    Err(Error::MissingRecord(key.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridOptions {
    /// Worker threads; 0 uses rayon's default.
    pub jobs: usize,
    /// Runs per commit.
    pub chunk_size: usize,
    /// Shuffles execution order; results must not depend on it.
    pub order_seed: Option<u64>,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            jobs: 0,
            chunk_size: 64,
            order_seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GridOutcome {
    pub new_records: usize,
    pub skipped: usize,
}

/// Trains every missing `(member, seed, mode)` of the grid into `store`.
pub fn run_grid(
    cfg: &GridConfig,
    prepared: &Prepared,
    store: &mut ResultStore,
    opts: GridOptions,
) -> Result<GridOutcome> {
    let mut tasks = Vec::new();
    let mut skipped = 0;
    for (_, member) in prepared.family.members() {
        let digest = crate::train::config_digest(&prepared.spec, &cfg.train, member);
        for &seed in &cfg.seeds {
            for &mode in &cfg.init_modes {
                let key = RecordKey {
                    dataset_id: member.source_id().to_string(),
                    seed,
                    init_mode: mode,
                };
                if store.contains(&key, &digest)? {
                    skipped += 1;
                } else {
                    tasks.push((member, seed, mode));
                }
            }
        }
    }
    if let Some(s) = opts.order_seed {
        tasks.shuffle(&mut derive_stream(s, "execution-order"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut new_records = 0;
    for chunk in tasks.chunks(opts.chunk_size.max(1)) {
        let done: Vec<ExperimentRecord> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&(member, seed, mode)| {
                    SgdRun {
                        spec: &prepared.spec,
                        data: member,
                        config: &cfg.train,
                        seed,
                        init_mode: mode,
                        fixed_init: None,
                        validation: Some(&prepared.validation),
                    }
                    .run()
                })
                .collect::<Result<_>>()
        })?;
        for r in done {
            if store.insert(r)? {
                new_records += 1;
            }
        }
        store.commit()?;
    }
    Ok(GridOutcome { new_records, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub dataset: String,
    pub n: usize,
    pub members: usize,
    pub seeds: usize,
    pub init_mode: InitMode,
    pub delta: f64,
    pub sensitivity_theoretical: Option<f64>,
    pub sensitivity_empirical: f64,
    pub sigma_i: f64,
    pub epsilon_theoretical: Option<f64>,
    pub epsilon_empirical: f64,
    /// Trailing partial batches are dropped each epoch.
    pub batching: &'static str,
    pub note: &'static str,
}

const EPSILON_NOTE: &str = "descriptive estimate of seed-induced variability, not a privacy guarantee";

impl TableRow {
    fn from_report(name: &str, n: usize, members: usize, seeds: usize, r: &EpsilonReport) -> Self {
        TableRow {
            dataset: name.to_string(),
            n,
            members,
            seeds,
            init_mode: r.init_mode,
            delta: r.delta,
            sensitivity_theoretical: r.sensitivity_theoretical,
            sensitivity_empirical: r.sensitivity_empirical,
            sigma_i: r.sigma_i,
            epsilon_theoretical: r.epsilon_theoretical.map(|e| e.value),
            epsilon_empirical: r.epsilon_empirical.value,
            batching: "drop_remainder",
            note: EPSILON_NOTE,
        }
    }
}

/// Report files by name, plus notices for items that could not be produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportBundle {
    pub files: BTreeMap<String, String>,
    pub notices: Vec<String>,
}

impl ReportBundle {
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in &self.files {
            write_atomic(&dir.join(name), body.as_bytes())?;
        }
        Ok(())
    }

    fn item<T>(&mut self, name: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.notices.push(format!("{name}: {e}"));
                None
            }
        }
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) {
        let mut s = serde_json::to_string_pretty(v).expect("serializable");
        s.push('\n');
        self.files.insert(name.to_string(), s);
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Preferred init mode for ε: vary when present.
pub fn primary_mode(records: &[ExperimentRecord]) -> InitMode {
    if records.iter().any(|r| r.key.init_mode == InitMode::Vary) || records.is_empty() {
        InitMode::Vary
    } else {
        InitMode::Fixed
    }
}

/// Builds every report from an immutable record snapshot. Items that lack
/// the records they need are skipped with a notice.
pub fn make_reports(records: &[ExperimentRecord], cfg: &GridConfig, prepared: &Prepared) -> ReportBundle {
    let mut b = ReportBundle::default();
    let ids = prepared.member_ids();
    let delta = prepared.delta(cfg);
    let theoretical = prepared.theoretical_sensitivity(cfg);
    let mode = primary_mode(records);
    let n = prepared.n();
    let seeds = records.iter().map(|r| r.key.seed).collect::<BTreeSet<_>>().len();

    // (a) summary table, one row per init mode present.
    let mut rows = Vec::new();
    let mut primary = None;
    for m in [InitMode::Vary, InitMode::Fixed] {
        if !records.iter().any(|r| r.key.init_mode == m) {
            continue;
        }
        if let Some(rep) = b.item(
            &format!("table[{m}]"),
            epsilon_report(records, &ids, m, delta, theoretical),
        ) {
            rows.push(TableRow::from_report(&cfg.name, n, ids.len(), seeds, &rep));
            if m == mode {
                primary = Some(rep);
            }
        }
    }
    if rows.is_empty() {
        b.notices.push("table: no records".into());
    } else {
        b.json("table.json", &rows);
    }

    // (b) distance distributions.
    if let Some(d) = b.item("deltas", delta_distributions(records, &ids)) {
        for (kind, s) in &d.summaries {
            b.files
                .insert(format!("hist_{}.csv", kind.as_str()), s.histogram.to_csv());
        }
        let summary: BTreeMap<&str, _> = d.summaries.iter().map(|(k, s)| (k.as_str(), s)).collect();
        b.json("deltas.json", &summary);
        for kind in DeltaKind::ALL {
            if !d.summaries.contains_key(&kind) {
                b.notices
                    .push(format!("deltas: no admissible pairs of kind {}", kind.as_str()));
            }
        }
    }

    // (c) pairwise ε.
    if let Some(rep) = &primary {
        let mut csv = String::from("a,b,local_sensitivity,local_sigma,epsilon\n");
        for p in &rep.pairwise_epsilons {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                p.a, p.b, p.local_sensitivity, p.local_sigma, p.epsilon.value
            ));
        }
        b.files.insert("pairwise_epsilon.csv".into(), csv);
    }

    // (d) utility.
    if cfg.epsilons.is_empty() {
        b.notices.push("utility: omitted, empty epsilon list".into());
    } else if let Some(rep) = &primary {
        let mut models: Vec<(String, WeightVector)> = records
            .iter()
            .filter(|r| r.key.init_mode == mode)
            .map(|r| (r.key.to_string(), r.final_weights.clone()))
            .collect();
        models.sort_by(|a, b| a.0.cmp(&b.0));
        let mut choices = vec![("empirical", rep.sensitivity_empirical)];
        if let Some(t) = theoretical {
            choices.push(("theoretical", t));
        }
        let mut summaries = BTreeMap::new();
        for (name, sens) in choices {
            let inp = UtilityInputs {
                spec: prepared.spec,
                models: &models,
                test: &prepared.test,
                sensitivity: sens,
                sigma_i: rep.sigma_i,
                delta,
                epsilons: &cfg.epsilons,
                noise_seed: cfg.report_seed,
                significance: cfg.significance,
            };
            let res = if prepared.test.n() == 0 {
                Err(Error::Empty("test partition"))
            } else {
                compare_utilities(&inp)
            };
            if let Some(t) = b.item(&format!("utility[{name}]"), res) {
                b.files.insert(format!("utility_{name}.csv"), t.to_csv());
                summaries.insert(name, t);
            }
        }
        if !summaries.is_empty() {
            b.json("utility.json", &summaries);
        }
    }

    // (e) step curves.
    if let Some(curve) = b.item(
        "stability",
        stability_vs_steps(records, &ids, mode, prepared.bound_params(cfg)),
    ) {
        let mut csv = String::from("step,empirical,sigma_fix,sigma_vary,theoretical,theoretical_stepwise\n");
        for p in &curve {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.step,
                opt(p.empirical),
                opt(p.sigma_fix),
                opt(p.sigma_vary),
                opt(p.theoretical),
                opt(p.theoretical_stepwise)
            ));
        }
        b.files.insert("stability.csv".into(), csv);
    }

    // (f) normality.
    let chosen: Vec<&ExperimentRecord> = records.iter().filter(|r| r.key.init_mode == mode).collect();
    if let Some(sw) = b.item("normality", normality_sweep(&chosen, 0.05)) {
        let mut csv = String::from("dataset_id,coordinate,w,p\n");
        for t in &sw.tests {
            csv.push_str(&format!("{},{},{},{}\n", t.dataset_id, t.coordinate, t.w, t.p_value));
        }
        b.files.insert("normality.csv".into(), csv);
        let mut summary = sw.clone();
        summary.tests.clear();
        b.json("normality.json", &summary);
    }

    // (g) convergence.
    let mut sizes: Vec<usize> = std::iter::successors(Some(1usize), |s| Some(s * 2))
        .take_while(|&s| s < seeds)
        .collect();
    sizes.push(seeds);
    if let Some(c) = b.item(
        "convergence",
        estimate_convergence(records, &ids, mode, &sizes, cfg.report_seed),
    ) {
        let mut csv = String::from("seeds_used,experiments,empirical,sigma_i\n");
        for p in &c {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                p.seeds_used,
                p.experiments,
                p.empirical,
                opt(p.sigma_i)
            ));
        }
        b.files.insert("convergence.csv".into(), csv);
    }

    let notices = b.notices.clone();
    b.json("notices.json", &notices);
    b
}
