//! Dataset loading: MNIST IDX files, tabular CSV, a synthetic tabular
//! substitute, and a stratified train/test split.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::{self, RngStream};

const IDX_LABELS_U8: u32 = 0x0000_0801;
const IDX_IMAGES_U8: u32 = 0x0000_0803;
/// IDX type code 0x0D (f64), two dimensions.
const IDX_MATRIX_F64: u32 = 0x0000_0D02;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Original label value for each class index.
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let label_names = (0..num_classes).map(|c| c.to_string()).collect();
        Self::with_label_names(name, features, labels, num_classes, label_names)
    }

    pub fn with_label_names(
        name: impl Into<String>,
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        label_names: Vec<String>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: features.nrows(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        if labels.len() < num_classes {
            return Err(Error::invalid(format!(
                "{} samples is fewer than {num_classes} classes",
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        if label_names.len() != num_classes {
            return Err(Error::DimensionMismatch {
                expected: num_classes,
                got: label_names.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            num_classes,
            label_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers the given rows into a training batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let features = self.gather(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(features, labels, self.num_classes)
    }

    pub fn gather(&self, indices: &[usize]) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((indices.len(), d));
        for (mut dst, &i) in out.outer_iter_mut().zip(indices) {
            dst.assign(&self.features.row(i));
        }
        out
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            name: name.into(),
            features: self.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            label_names: self.label_names.clone(),
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_U8 {
        return Err(Error::format(path, format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            path,
            format!("header declares {n} labels, file holds {}", body.len()),
        ));
    }
    Ok(body[..n].to_vec())
}

/// Reads an image file (u8, 3 dims, scaled by 1/255) or a raw f64 matrix.
fn read_idx_features(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0, path)?;
    match magic {
        IDX_IMAGES_U8 => {
            let n = read_u32(&bytes, 4, path)? as usize;
            let rows = read_u32(&bytes, 8, path)? as usize;
            let cols = read_u32(&bytes, 12, path)? as usize;
            let d = rows * cols;
            let body = &bytes[16..];
            if body.len() < n * d {
                return Err(Error::format(
                    path,
                    format!("header declares {n} images of {d} pixels, file truncated"),
                ));
            }
            let values = body[..n * d].iter().map(|&p| f64::from(p) / 255.0).collect();
            Ok(Array2::from_shape_vec((n, d), values).expect("sized above"))
        }
        IDX_MATRIX_F64 => {
            let n = read_u32(&bytes, 4, path)? as usize;
            let d = read_u32(&bytes, 8, path)? as usize;
            let body = &bytes[12..];
            if body.len() < n * d * 8 {
                return Err(Error::format(path, "f64 matrix truncated"));
            }
            let values = body[..n * d * 8]
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            Ok(Array2::from_shape_vec((n, d), values).expect("sized above"))
        }
        other => Err(Error::format(path, format!("bad image magic {other:#010x}"))),
    }
}

/// Loads an MNIST image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let features = read_idx_features(images_path)?;
    let raw = read_idx_labels(labels_path)?;
    if raw.len() != features.nrows() {
        return Err(Error::format(
            labels_path,
            format!("{} labels but {} images", raw.len(), features.nrows()),
        ));
    }
    let num_classes = raw.iter().copied().max().map_or(0, |m| usize::from(m) + 1);
    let labels = raw.into_iter().map(usize::from).collect();
    let name = images_path
        .file_name()
        .map_or_else(|| "mnist".to_string(), |f| f.to_string_lossy().into_owned());
    Dataset::new(name, features, labels, num_classes)
}

/// Writes features as an IDX f64 matrix and labels as IDX u8, readable by
/// [`load_mnist_idx`]. Lossless.
pub fn write_idx(dataset: &Dataset, features_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    if dataset.num_classes > 256 {
        return Err(Error::invalid("IDX labels hold at most 256 classes"));
    }
    let mut f = Vec::with_capacity(12 + dataset.features.len() * 8);
    f.extend_from_slice(&IDX_MATRIX_F64.to_be_bytes());
    f.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    f.extend_from_slice(&(dataset.dim() as u32).to_be_bytes());
    for v in dataset.features.iter() {
        f.extend_from_slice(&v.to_be_bytes());
    }
    fs::File::create(features_path)?.write_all(&f)?;

    let mut l = Vec::with_capacity(8 + dataset.len());
    l.extend_from_slice(&IDX_LABELS_U8.to_be_bytes());
    l.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    l.extend(dataset.labels.iter().map(|&x| x as u8));
    fs::File::create(labels_path)?.write_all(&l)?;
    Ok(())
}

enum Column {
    Numeric(Vec<f64>),
    Categorical { values: Vec<usize>, levels: usize },
}

/// Loads a CSV with a header row. A column is numeric when its first value
/// parses as a number; numeric columns are z-scored, the rest one-hot encoded
/// in first-appearance order. Labels are indexed in first-appearance order.
pub fn load_tabular_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_at = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::format(path, format!("missing label column `{label_column}`")))?;

    let mut raw_rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        raw_rows.push(record.iter().map(|v| v.trim().to_string()).collect());
    }
    if raw_rows.is_empty() {
        return Err(Error::format(path, "no data rows"));
    }

    let mut label_index: HashMap<String, usize> = HashMap::new();
    let mut label_names = Vec::new();
    let mut labels = Vec::with_capacity(raw_rows.len());
    for row in &raw_rows {
        let name = &row[label_at];
        let next = label_names.len();
        let id = *label_index.entry(name.clone()).or_insert_with(|| {
            label_names.push(name.clone());
            next
        });
        labels.push(id);
    }

    let mut columns = Vec::new();
    for (c, header) in headers.iter().enumerate() {
        if c == label_at {
            continue;
        }
        let numeric = raw_rows[0][c].parse::<f64>().is_ok();
        if numeric {
            let mut values = Vec::with_capacity(raw_rows.len());
            for (r, row) in raw_rows.iter().enumerate() {
                let v = row[c].parse::<f64>().map_err(|_| {
                    Error::format(
                        path,
                        format!(
                            "row {}: non-numeric value `{}` in numeric column `{header}`",
                            r + 2,
                            row[c]
                        ),
                    )
                })?;
                if !v.is_finite() {
                    return Err(Error::format(
                        path,
                        format!("row {}: non-finite value in `{header}`", r + 2),
                    ));
                }
                values.push(v);
            }
            columns.push(Column::Numeric(standardize(values)));
        } else {
            let mut levels: HashMap<&str, usize> = HashMap::new();
            let values = raw_rows
                .iter()
                .map(|row| {
                    let n = levels.len();
                    *levels.entry(row[c].as_str()).or_insert(n)
                })
                .collect();
            columns.push(Column::Categorical {
                values,
                levels: levels.len(),
            });
        }
    }

    let d: usize = columns
        .iter()
        .map(|c| match c {
            Column::Numeric(_) => 1,
            Column::Categorical { levels, .. } => *levels,
        })
        .sum();
    let mut features = Array2::zeros((raw_rows.len(), d));
    let mut offset = 0;
    for col in &columns {
        match col {
            Column::Numeric(values) => {
                for (r, &v) in values.iter().enumerate() {
                    features[[r, offset]] = v;
                }
                offset += 1;
            }
            Column::Categorical { values, levels } => {
                for (r, &v) in values.iter().enumerate() {
                    features[[r, offset + v]] = 1.0;
                }
                offset += levels;
            }
        }
    }
    let name = path
        .file_stem()
        .map_or_else(|| "tabular".to_string(), |f| f.to_string_lossy().into_owned());
    let k = label_names.len();
    Dataset::with_label_names(name, features, labels, k, label_names)
}

/// Population z-score; a zero-variance column maps to all zeros.
fn standardize(mut values: Vec<f64>) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let std = if std > 0.0 { std } else { 1.0 };
    values.iter_mut().for_each(|v| *v = (*v - mean) / std);
    values
}

/// Class separation of the synthetic blobs: class `c` is centred at
/// `SYNTH_SEPARATION * e_c`.
pub const SYNTH_SEPARATION: f64 = 4.0;

/// `classes` unit-covariance Gaussian blobs centred on the scaled simplex
/// vertices `SYNTH_SEPARATION * e_c`. Requires `dim >= classes`.
pub fn synth_tabular(classes: usize, n: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("synthetic data needs at least 2 classes"));
    }
    if n < classes * 10 {
        return Err(Error::invalid(format!(
            "need at least {} samples for {classes} classes",
            classes * 10
        )));
    }
    if dim < classes {
        return Err(Error::invalid(format!(
            "dimension {dim} cannot hold {classes} simplex vertices"
        )));
    }
    let mut rng = rng::stream(seed, &[]);
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in features.outer_iter_mut().enumerate() {
        let c = i % classes;
        for (j, x) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = z + if j == c { SYNTH_SEPARATION } else { 0.0 };
        }
        labels.push(c);
    }
    Dataset::new(format!("synthetic-k{classes}"), features, labels, classes)
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// False when some class had fewer than two samples and the split fell
    /// back to a plain shuffle.
    pub stratified: bool,
}

/// Splits into train/test with `round(n * test_fraction)` test samples,
/// stratified by class (largest-remainder allocation) when every class has at
/// least two samples.
pub fn global_split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut rng: RngStream = rng::stream(seed, &[rng::tag::SPLIT]);
    let n = dataset.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_test = n_test.clamp(1, n - 1);

    let counts = dataset.class_counts();
    let stratified = counts.iter().all(|&c| c == 0 || c >= 2);

    let (mut train_idx, mut test_idx) = if stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
        for (i, &l) in dataset.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let quotas = largest_remainder(&counts, n_test);
        let mut train = Vec::with_capacity(n - n_test);
        let mut test = Vec::with_capacity(n_test);
        for (members, quota) in by_class.iter_mut().zip(quotas) {
            members.shuffle(&mut rng);
            test.extend_from_slice(&members[..quota]);
            train.extend_from_slice(&members[quota..]);
        }
        (train, test)
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        let test = all[..n_test].to_vec();
        let train = all[n_test..].to_vec();
        (train, test)
    };
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(Split {
        train: dataset.subset(&train_idx, format!("{}-train", dataset.name)),
        test: dataset.subset(&test_idx, format!("{}-test", dataset.name)),
        train_indices: train_idx,
        test_indices: test_idx,
        stratified,
    })
}

/// Distributes `total` proportionally to `counts`: floors first, then one
/// extra to the largest fractional parts (ties to the lower class index).
/// Keeps at least one sample of each nonempty class on both sides.
fn largest_remainder(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * total as f64 / n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(order.len() * 2) {
        if assigned >= total {
            break;
        }
        if quotas[c] + 1 < counts[c] {
            quotas[c] += 1;
            assigned += 1;
        }
    }
    for (q, &c) in quotas.iter_mut().zip(counts) {
        if c >= 2 {
            *q = (*q).clamp(1, c - 1);
        }
    }
    quotas
}

/// Describes where a dataset came from; recorded in partition manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub samples: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub label_names: Vec<String>,
}

impl From<&Dataset> for DatasetInfo {
    fn from(d: &Dataset) -> Self {
        Self {
            name: d.name.clone(),
            samples: d.len(),
            dim: d.dim(),
            num_classes: d.num_classes,
            label_names: d.label_names.clone(),
        }
    }
}
