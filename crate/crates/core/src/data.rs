//! Dataset ingestion, standardization, splits and synthetic blobs.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-column affine scaling `(x − mean) / std` for the retained columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardization {
    pub fn identity(m: usize) -> Self {
        Self {
            means: vec![0.0; m],
            stds: vec![1.0; m],
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.means.len() {
            return Err(Error::Input(format!(
                "standardization fitted on {} columns applied to {}",
                self.means.len(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.means[j]) / self.stds[j]
        }))
    }
}

/// Feature matrix and class labels.
///
/// `labels` hold 0-based class indices into `label_names`; files and reports
/// use the original names (or 1..C).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub label_column: String,
    /// Statistics that were applied to `features` (identity for raw data).
    pub scaling: Standardization,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.label_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `idx` in the given order; label and feature metadata are kept.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let m = self.n_features();
        Dataset {
            features: DMatrix::from_fn(idx.len(), m, |i, j| self.features[(idx[i], j)]),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            label_names: self.label_names.clone(),
            feature_names: self.feature_names.clone(),
            label_column: self.label_column.clone(),
            scaling: self.scaling.clone(),
        }
    }

    fn keep_columns(&self, cols: &[usize]) -> Dataset {
        let mut d = self.clone();
        d.features = DMatrix::from_fn(self.n_rows(), cols.len(), |i, j| self.features[(i, cols[j])]);
        d.feature_names = cols.iter().map(|&c| self.feature_names[c].clone()).collect();
        d.scaling = Standardization {
            means: cols.iter().map(|&c| self.scaling.means[c]).collect(),
            stds: cols.iter().map(|&c| self.scaling.stds[c]).collect(),
        };
        d
    }

    /// Fits column means and standard deviations on `self`, dropping
    /// zero-variance columns. Returns the standardized dataset.
    pub fn fit_standardize(&self) -> Result<Dataset> {
        let n = self.n_rows();
        if n == 0 {
            return Err(Error::Input("cannot standardize an empty dataset".into()));
        }
        let mut kept = Vec::new();
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for j in 0..self.n_features() {
            let col = self.features.column(j);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if std > 0.0 && std.is_finite() {
                kept.push(j);
                means.push(mean);
                stds.push(std);
            } else {
                log::warn!("dropping zero-variance feature '{}'", self.feature_names[j]);
            }
        }
        if kept.is_empty() {
            return Err(Error::Input("every feature has zero variance".into()));
        }
        let mut out = self.keep_columns(&kept);
        out.scaling = Standardization { means, stds };
        out.features = out.scaling.apply(&out.features)?;
        Ok(out)
    }

    /// Applies the scaling of `fitted` (matching columns by name).
    pub fn standardize_like(&self, fitted: &Dataset) -> Result<Dataset> {
        let cols = column_indices(&self.feature_names, &fitted.feature_names)?;
        let mut out = self.keep_columns(&cols);
        out.scaling = fitted.scaling.clone();
        out.features = out.scaling.apply(&out.features)?;
        out.label_names = fitted.label_names.clone();
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push(self.label_column.clone());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|&v| crate::fmt_f64(v)).collect();
            rec.push(self.label_names[self.labels[i]].clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn column_indices(have: &[String], want: &[String]) -> Result<Vec<usize>> {
    want.iter()
        .map(|name| {
            have.iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Input(format!("feature column '{name}' is missing")))
        })
        .collect()
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::ingestion(path, 0, e.to_string()),
        _ => Error::Csv(e),
    })?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::ingestion(path, 1, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            match e.kind() {
                csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::ingestion(
                    path,
                    line,
                    format!("ragged row: expected {expected_len} fields, found {len}"),
                ),
                _ => Error::ingestion(path, line, e.to_string()),
            }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        rows.push((line, rec.iter().map(|s| s.trim().to_string()).collect()));
    }
    Ok(RawTable { header, rows })
}

fn parse_feature(path: &Path, line: u64, column: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::ingestion(path, line, format!("non-numeric value '{s}' in feature column '{column}'")))?;
    if !v.is_finite() {
        return Err(Error::ingestion(path, line, format!("non-finite value '{s}' in feature column '{column}'")));
    }
    Ok(v)
}

/// Reads a headered CSV. Labels are mapped to classes in order of first
/// appearance; constant feature columns are dropped with a warning.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let table = read_table(path)?;
    let label_idx = table
        .header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::ingestion(path, 1, format!("label column '{label_column}' not found")))?;
    let feature_cols: Vec<usize> = (0..table.header.len()).filter(|&c| c != label_idx).collect();
    if feature_cols.is_empty() {
        return Err(Error::ingestion(path, 1, "no feature columns"));
    }
    let n = table.rows.len();
    let m = feature_cols.len();
    let mut features = DMatrix::zeros(n, m);
    let mut labels = Vec::with_capacity(n);
    let mut label_names: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    for (i, (line, rec)) in table.rows.iter().enumerate() {
        for (j, &c) in feature_cols.iter().enumerate() {
            features[(i, j)] = parse_feature(path, *line, &table.header[c], &rec[c])?;
        }
        let name = &rec[label_idx];
        if name.is_empty() {
            return Err(Error::ingestion(path, *line, "empty label"));
        }
        let k = *lookup.entry(name.clone()).or_insert_with(|| {
            label_names.push(name.clone());
            label_names.len() - 1
        });
        labels.push(k);
    }
    if label_names.len() < 2 {
        return Err(Error::ingestion(
            path,
            table.rows.first().map(|r| r.0).unwrap_or(1),
            format!("need at least 2 classes, found {}", label_names.len()),
        ));
    }
    let feature_names: Vec<String> = feature_cols.iter().map(|&c| table.header[c].clone()).collect();
    let mut keep = Vec::with_capacity(m);
    for j in 0..m {
        let col = features.column(j);
        if col.iter().all(|&v| v == col[0]) {
            log::warn!("dropping constant feature column '{}'", feature_names[j]);
        } else {
            keep.push(j);
        }
    }
    if keep.is_empty() {
        return Err(Error::ingestion(path, 1, "every feature column is constant"));
    }
    let d = Dataset {
        features,
        labels,
        label_names,
        feature_names,
        label_column: label_column.to_string(),
        scaling: Standardization::identity(m),
    };
    Ok(if keep.len() < m { d.keep_columns(&keep) } else { d })
}

/// Reads the named feature columns (in that order) and, when present, the
/// label column as raw strings.
pub fn read_features(
    path: &Path,
    feature_names: &[String],
    label_column: Option<&str>,
) -> Result<(DMatrix<f64>, Option<Vec<String>>)> {
    let table = read_table(path)?;
    let cols = column_indices(&table.header, feature_names)
        .map_err(|e| Error::ingestion(path, 1, e.to_string()))?;
    let mut x = DMatrix::zeros(table.rows.len(), cols.len());
    for (i, (line, rec)) in table.rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            x[(i, j)] = parse_feature(path, *line, &table.header[c], &rec[c])?;
        }
    }
    let labels = label_column
        .and_then(|l| table.header.iter().position(|h| h == l))
        .map(|c| table.rows.iter().map(|(_, r)| r[c].clone()).collect());
    Ok((x, labels))
}

/// Centers of `classes` clusters with all mutual distances equal to
/// `separation` when `dims ≥ classes − 1`; otherwise adjacent centers on a
/// circle (or line) at that distance.
fn blob_centers(classes: usize, dims: usize, separation: f64) -> DMatrix<f64> {
    let mut centers = DMatrix::zeros(classes, dims);
    if classes < 2 {
        return centers;
    }
    if dims + 1 >= classes {
        // regular simplex: centered unit vectors e_j − 1/C, Gram–Schmidt basis
        let c = classes;
        let verts: Vec<DVector<f64>> = (0..c)
            .map(|j| DVector::from_fn(c, |i, _| if i == j { 1.0 } else { 0.0 } - 1.0 / c as f64))
            .collect();
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for v in verts.iter().take(c - 1) {
            let mut u = v.clone();
            for b in &basis {
                u -= b * b.dot(v);
            }
            basis.push(u.normalize());
        }
        let scale = separation / std::f64::consts::SQRT_2;
        for (j, v) in verts.iter().enumerate() {
            for (d, b) in basis.iter().enumerate() {
                centers[(j, d)] = scale * b.dot(v);
            }
        }
    } else if dims == 1 {
        let mid = (classes - 1) as f64 / 2.0;
        for j in 0..classes {
            centers[(j, 0)] = (j as f64 - mid) * separation;
        }
    } else {
        let step = std::f64::consts::TAU / classes as f64;
        let radius = separation / (2.0 * (step / 2.0).sin());
        for j in 0..classes {
            centers[(j, 0)] = radius * (step * j as f64).cos();
            centers[(j, 1)] = radius * (step * j as f64).sin();
        }
    }
    centers
}

/// Isotropic unit-variance Gaussian clusters, balanced to within one point,
/// rows shuffled with `seed`.
pub fn make_blobs(n: usize, classes: usize, dims: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || classes < 2 || dims == 0 {
        return Err(Error::Config("make_blobs needs n >= 1, classes >= 2 and dims >= 1".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation must be >= 0, got {separation}")));
    }
    let centers = blob_centers(classes, dims, separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut features = DMatrix::zeros(n, dims);
    for (i, &y) in labels.iter().enumerate() {
        for d in 0..dims {
            let z: f64 = StandardNormal.sample(&mut rng);
            features[(i, d)] = centers[(y, d)] + z;
        }
    }
    Ok(Dataset {
        features,
        labels,
        label_names: (1..=classes).map(|k| k.to_string()).collect(),
        feature_names: (1..=dims).map(|d| format!("x{d}")).collect(),
        label_column: "target".into(),
        scaling: Standardization::identity(dims),
    })
}

/// Train/test split; scaling is fitted on the training part and applied to
/// both. Stratified splits allocate ⌊f·n_c⌋ test rows per class and hand the
/// remainder out one per class in class-index order.
pub fn train_test_split(d: &Dataset, test_fraction: f64, seed: u64, stratified: bool) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n = d.n_rows();
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_idx = Vec::with_capacity(n_test);
    let mut train_idx = Vec::with_capacity(n - n_test.min(n));
    if stratified {
        let c = d.class_count();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
        for (i, &y) in d.labels.iter().enumerate() {
            members[y].push(i);
        }
        for (k, m) in members.iter().enumerate() {
            if m.len() < 2 {
                return Err(Error::Config(format!(
                    "class '{}' has {} member(s); stratification needs at least 2",
                    d.label_names[k],
                    m.len()
                )));
            }
        }
        let mut quota: Vec<usize> = members
            .iter()
            .map(|m| ((test_fraction * m.len() as f64).floor() as usize).clamp(1, m.len() - 1))
            .collect();
        let mut assigned: usize = quota.iter().sum();
        let mut k = 0;
        let mut stalled = 0;
        while assigned < n_test && stalled < c {
            if quota[k] + 1 < members[k].len() {
                quota[k] += 1;
                assigned += 1;
                stalled = 0;
            } else {
                stalled += 1;
            }
            k = (k + 1) % c;
        }
        for (k, m) in members.iter_mut().enumerate() {
            m.shuffle(&mut rng);
            test_idx.extend_from_slice(&m[..quota[k]]);
            train_idx.extend_from_slice(&m[quota[k]..]);
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        test_idx.extend_from_slice(&order[..n_test]);
        train_idx.extend_from_slice(&order[n_test..]);
    }
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let train = d.subset(&train_idx).fit_standardize()?;
    let test = d.subset(&test_idx).standardize_like(&train)?;
    Ok((train, test))
}
