//! Datasets: loading, synthesis, preprocessing, and neighbour families.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_stream, TAG_GRP, TAG_SPLIT, TAG_SYNTHETIC};

/// Feature matrix with binary labels and a certified bound on row norms.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetInstance {
    features: Array2<f64>,
    labels: Vec<u8>,
    norm_bound: f64,
    source_id: String,
}

fn row_norm(row: ArrayView1<f64>) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl DatasetInstance {
    /// Builds an instance whose `norm_bound` is the observed maximum row norm.
    pub fn new(features: Array2<f64>, labels: Vec<u8>, source_id: impl Into<String>) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        if d == 0 {
            return Err(Error::invalid("dataset must have at least one feature column"));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::invalid(format!("label {bad} is not 0 or 1")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features contain non-finite values"));
        }
        let norm_bound = features.rows().into_iter().map(row_norm).fold(0.0, f64::max);
        Ok(Self {
            features,
            labels,
            norm_bound,
            source_id: source_id.into(),
        })
    }

    fn with_bound(mut self, norm_bound: f64) -> Self {
        self.norm_bound = norm_bound;
        self
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn max_row_norm(&self) -> f64 {
        self.features.rows().into_iter().map(row_norm).fold(0.0, f64::max)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], source_id: impl Into<String>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::invalid(format!(
                "row index {bad} out of range for {} rows",
                self.n()
            )));
        }
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self::new(features, labels, source_id)?.with_bound(self.norm_bound))
    }

    pub fn with_source_id(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    /// Fraction of rows labelled 1.
    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().filter(|&&y| y == 1).count() as f64 / self.n() as f64
    }
}

/// Loads a headered CSV. Labels that are already 0/1 are kept; otherwise the
/// first label value seen maps to 0 and the other to 1.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<DatasetInstance> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Csv(format!("no column named {label_column:?}")))?;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut label_codes: Vec<String> = Vec::new();
    let mut rows = 0usize;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(Error::Csv(format!(
                "row {} has {} fields, expected {}",
                line + 2,
                rec.len(),
                headers.len()
            )));
        }
        for (col, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if col == label_idx {
                let code = match label_codes.iter().position(|c| c == cell) {
                    Some(code) => code,
                    None => {
                        if label_codes.len() == 2 {
                            return Err(Error::Csv(format!(
                                "label column has more than two distinct values ({:?}, {:?}, {cell:?})",
                                label_codes[0], label_codes[1]
                            )));
                        }
                        label_codes.push(cell.to_string());
                        label_codes.len() - 1
                    }
                };
                labels.push(code as u8);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Csv(format!(
                        "row {}, column {:?}: {cell:?} is not numeric",
                        line + 2,
                        &headers[col]
                    ))
                })?;
                values.push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty("dataset"));
    }
    // Labels already written as 0/1 keep their values.
    if label_codes.iter().all(|c| c == "0" || c == "1") && label_codes.first().is_some_and(|c| c == "1") {
        labels.iter_mut().for_each(|y| *y = 1 - *y);
    }
    let d = headers.len() - 1;
    let features = Array2::from_shape_vec((rows, d), values).map_err(|e| Error::Csv(e.to_string()))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv").to_string();
    DatasetInstance::new(features, labels, id)
}

/// Writes columns `x0..x{d-1},label`.
pub fn write_csv(data: &DatasetInstance, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let mut header: Vec<String> = (0..data.d()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = data.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(data.labels[i].to_string());
        w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Two unit-variance spherical Gaussian classes whose means sit at
/// `∓separation/2` along the first axis. Class 0 gets the odd row when `n` is odd.
pub fn generate_synthetic(n: usize, d: usize, separation: f64, seed: u64) -> Result<DatasetInstance> {
    if n < 2 || d < 1 || !(separation >= 0.0) {
        return Err(Error::invalid(format!(
            "synthetic data needs n >= 2, d >= 1, separation >= 0 (got {n}, {d}, {separation})"
        )));
    }
    let mut rng = derive_stream(seed, TAG_SYNTHETIC);
    let n1 = n / 2;
    let mut labels: Vec<u8> = std::iter::repeat_n(0u8, n - n1)
        .chain(std::iter::repeat_n(1u8, n1))
        .collect();
    labels.shuffle(&mut rng);
    let mut features = Array2::<f64>::zeros((n, d));
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        row[0] += if labels[i] == 1 {
            separation / 2.0
        } else {
            -separation / 2.0
        };
    }
    DatasetInstance::new(features, labels, format!("synthetic-n{n}-d{d}-s{seed}"))
}

/// Scale factor mapping a dataset into the unit ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxNormScaler {
    pub scale: f64,
}

impl MaxNormScaler {
    pub fn fit(data: &DatasetInstance) -> Result<Self> {
        let max = data.max_row_norm();
        if max == 0.0 {
            return Err(Error::invalid("cannot normalize an all-zero dataset"));
        }
        Ok(Self { scale: 1.0 / max })
    }

    /// Rows fitted on get bound 1; other data gets its observed bound.
    pub fn apply(&self, data: &DatasetInstance) -> DatasetInstance {
        let features = data.features.mapv(|v| v * self.scale);
        let mut out = DatasetInstance::new(features, data.labels.clone(), data.source_id.clone())
            .expect("scaling preserves validity");
        let observed = out.norm_bound;
        // Absorb the rounding of the division so the certified bound stays 1.
        if observed <= 1.0 + 4.0 * f64::EPSILON {
            out.norm_bound = 1.0;
        }
        out
    }
}

pub fn normalize_max_norm(data: &DatasetInstance) -> Result<DatasetInstance> {
    Ok(MaxNormScaler::fit(data)?.apply(data))
}

/// A fitted principal-component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Array1<f64>,
    /// `d_out × d`, one component per row, by descending eigenvalue.
    pub components: Array2<f64>,
    pub eigenvalues: Vec<f64>,
}

impl PcaProjection {
    pub fn fit(data: &DatasetInstance, d_out: usize, train_rows: &[usize]) -> Result<Self> {
        let d = data.d();
        if d_out == 0 || d_out > d {
            return Err(Error::invalid(format!("PCA output dimension {d_out} not in 1..={d}")));
        }
        if train_rows.is_empty() {
            return Err(Error::Empty("PCA training rows"));
        }
        let train = data.features.select(Axis(0), train_rows);
        let mean = train.mean_axis(Axis(0)).expect("non-empty");
        let centered = &train - &mean;
        let denom = (train_rows.len().max(2) - 1) as f64;
        let cov = centered.t().dot(&centered) / denom;
        let cov = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut components = Array2::<f64>::zeros((d_out, d));
        let mut eigenvalues = Vec::with_capacity(d_out);
        for (k, &col) in order.iter().take(d_out).enumerate() {
            let v = eig.eigenvectors.column(col);
            let mut pivot = 0;
            for j in 1..d {
                if v[j].abs() > v[pivot].abs() {
                    pivot = j;
                }
            }
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for j in 0..d {
                components[[k, j]] = sign * v[j];
            }
            eigenvalues.push(eig.eigenvalues[col]);
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn apply(&self, data: &DatasetInstance) -> Result<DatasetInstance> {
        if data.d() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                found: data.d(),
            });
        }
        let projected = (&data.features - &self.mean).dot(&self.components.t());
        DatasetInstance::new(
            projected,
            data.labels.clone(),
            format!("{}+pca{}", data.source_id, self.components.nrows()),
        )
    }
}

/// Fits PCA on `train_rows` and projects every row of `data`.
pub fn pca_project(
    data: &DatasetInstance,
    d_out: usize,
    train_rows: &[usize],
) -> Result<(DatasetInstance, PcaProjection)> {
    let proj = PcaProjection::fit(data, d_out, train_rows)?;
    Ok((proj.apply(data)?, proj))
}

/// The `d × d_out` Gaussian projection matrix, filled row-major from the
/// `grp` stream and scaled by `1/√d_out`.
pub fn grp_matrix(d: usize, d_out: usize, seed: u64) -> Array2<f64> {
    let mut rng = derive_stream(seed, TAG_GRP);
    let scale = 1.0 / (d_out as f64).sqrt();
    let mut m = Array2::<f64>::zeros((d, d_out));
    for v in m.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = z * scale;
    }
    m
}

pub fn grp_project(data: &DatasetInstance, d_out: usize, seed: u64) -> Result<DatasetInstance> {
    if d_out == 0 {
        return Err(Error::invalid("random projection needs d_out >= 1"));
    }
    let m = grp_matrix(data.d(), d_out, seed);
    DatasetInstance::new(
        data.features.dot(&m),
        data.labels.clone(),
        format!("{}+grp{d_out}", data.source_id),
    )
}

pub fn select_features(data: &DatasetInstance, indices: &[usize]) -> Result<DatasetInstance> {
    if indices.is_empty() {
        return Err(Error::invalid("feature selection needs at least one column"));
    }
    let mut seen = vec![false; data.d()];
    for &j in indices {
        if j >= data.d() {
            return Err(Error::invalid(format!("column {j} out of range for d = {}", data.d())));
        }
        if std::mem::replace(&mut seen[j], true) {
            return Err(Error::invalid(format!("column {j} selected twice")));
        }
    }
    let features = data.features.select(Axis(1), indices);
    DatasetInstance::new(features, data.labels.clone(), data.source_id.clone())
}

/// Row-major indices of the central `crop × crop` square of a `width × height` image.
pub fn central_crop_indices(width: usize, height: usize, crop: usize) -> Result<Vec<usize>> {
    if crop == 0 || crop > width || crop > height {
        return Err(Error::invalid(format!(
            "crop {crop} does not fit a {width}x{height} image"
        )));
    }
    let top = (height - crop) / 2;
    let left = (width - crop) / 2;
    Ok((top..top + crop)
        .flat_map(|r| (left..left + crop).map(move |c| r * width + c))
        .collect())
}

/// Fractions of rows held out for validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            validation_fraction: 0.1,
            test_fraction: 0.15,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..1.0).contains(&f);
        if !ok(self.validation_fraction)
            || !ok(self.test_fraction)
            || self.validation_fraction + self.test_fraction >= 1.0
        {
            return Err(Error::invalid(format!(
                "split fractions must lie in [0,1) and sum below 1 (validation {}, test {})",
                self.validation_fraction, self.test_fraction
            )));
        }
        Ok(())
    }

    /// Test rows are taken first, validation from the remainder; each part is
    /// returned in ascending row order.
    pub fn split(&self, n: usize) -> Result<SplitIndices> {
        self.validate()?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut derive_stream(self.split_seed, TAG_SPLIT));
        let n_test = (n as f64 * self.test_fraction).round() as usize;
        let n_val = ((n - n_test) as f64 * self.validation_fraction).round() as usize;
        let mut test = idx[..n_test].to_vec();
        let mut validation = idx[n_test..n_test + n_val].to_vec();
        let mut train = idx[n_test + n_val..].to_vec();
        if train.is_empty() {
            return Err(Error::invalid("split leaves no training rows"));
        }
        test.sort_unstable();
        validation.sort_unstable();
        train.sort_unstable();
        Ok(SplitIndices {
            train,
            validation,
            test,
        })
    }
}

/// A base dataset and its replace-one neighbours `S_i`: row `i` replaced by
/// row 0, then row 0 dropped.
#[derive(Debug, Clone)]
pub struct NeighbourFamily {
    base: DatasetInstance,
    member_indices: Vec<usize>,
    members: Vec<DatasetInstance>,
    by_index: HashMap<usize, usize>,
}

pub fn member_id(base_id: &str, i: usize) -> String {
    format!("{base_id}/S{i}")
}

pub fn make_neighbour_family(base: &DatasetInstance, member_indices: &[usize]) -> Result<NeighbourFamily> {
    let n = base.n();
    if n < 3 {
        return Err(Error::invalid(format!(
            "neighbour family needs at least 3 rows, got {n}"
        )));
    }
    let mut members = Vec::with_capacity(member_indices.len());
    let mut by_index = HashMap::new();
    for &i in member_indices {
        if i == 0 || i >= n {
            return Err(Error::invalid(format!("member index {i} not in 1..{n}")));
        }
        if by_index.contains_key(&i) {
            continue;
        }
        let rows: Vec<usize> = (1..n).map(|r| if r == i { 0 } else { r }).collect();
        let member = base.subset(&rows, member_id(&base.source_id, i))?;
        by_index.insert(i, members.len());
        members.push(member);
    }
    let mut indices: Vec<usize> = member_indices.to_vec();
    let mut seen = std::collections::HashSet::new();
    indices.retain(|i| seen.insert(*i));
    Ok(NeighbourFamily {
        base: base.clone(),
        member_indices: indices,
        members,
        by_index,
    })
}

impl NeighbourFamily {
    pub fn base(&self) -> &DatasetInstance {
        &self.base
    }

    pub fn member_indices(&self) -> &[usize] {
        &self.member_indices
    }

    pub fn member(&self, i: usize) -> Option<&DatasetInstance> {
        self.by_index.get(&i).map(|&k| &self.members[k])
    }

    pub fn members(&self) -> impl Iterator<Item = (usize, &DatasetInstance)> {
        self.member_indices
            .iter()
            .map(move |&i| (i, &self.members[self.by_index[&i]]))
    }

    pub fn member_ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.source_id.clone()).collect()
    }

    /// Rows in every member.
    pub fn member_size(&self) -> usize {
        self.base.n() - 1
    }

    /// Positions (0-based) at which members `i` and `j` may differ.
    pub fn differing_positions(i: usize, j: usize) -> Vec<usize> {
        if i == j {
            Vec::new()
        } else {
            vec![i.min(j) - 1, i.max(j) - 1]
        }
    }
}
