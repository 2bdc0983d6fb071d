//! Average-rank comparison of methods across datasets.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Accuracy of every method (rows) on every dataset (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    methods: Vec<String>,
    datasets: Vec<String>,
    accuracy: DMatrix<f64>,
}

impl AccuracyTable {
    pub fn new(methods: Vec<String>, datasets: Vec<String>, accuracy: DMatrix<f64>) -> Result<Self> {
        if accuracy.shape() != (methods.len(), datasets.len()) {
            return Err(Error::Input("accuracy matrix does not match the method and dataset lists".into()));
        }
        if methods.is_empty() || datasets.is_empty() {
            return Err(Error::Input("accuracy table is empty".into()));
        }
        if let Some(v) = accuracy.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("accuracy {v} outside [0, 1]")));
        }
        Ok(Self {
            methods,
            datasets,
            accuracy,
        })
    }

    /// Reads the long form `dataset,method,accuracy`. Every (dataset, method)
    /// pair must appear exactly once.
    pub fn from_long_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::ingestion(path, 1, format!("missing column '{name}'")))
        };
        let (cd, cm, ca) = (col("dataset")?, col("method")?, col("accuracy")?);
        let mut methods: Vec<String> = Vec::new();
        let mut datasets: Vec<String> = Vec::new();
        let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                Error::ingestion(path, e.position().map(|p| p.line()).unwrap_or(0), e.to_string())
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let index = |list: &mut Vec<String>, name: &str| match list.iter().position(|s| s == name) {
                Some(i) => i,
                None => {
                    list.push(name.to_string());
                    list.len() - 1
                }
            };
            let d = index(&mut datasets, rec[cd].trim());
            let m = index(&mut methods, rec[cm].trim());
            let acc: f64 = rec[ca]
                .trim()
                .parse()
                .map_err(|_| Error::ingestion(path, line, format!("non-numeric accuracy '{}'", &rec[ca])))?;
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::ingestion(path, line, format!("accuracy {acc} outside [0, 1]")));
            }
            if cells.insert((m, d), acc).is_some() {
                return Err(Error::ingestion(path, line, "duplicate (dataset, method) entry"));
            }
        }
        let mut accuracy = DMatrix::zeros(methods.len(), datasets.len());
        for m in 0..methods.len() {
            for d in 0..datasets.len() {
                accuracy[(m, d)] = *cells.get(&(m, d)).ok_or_else(|| {
                    Error::ingestion(
                        path,
                        0,
                        format!("no accuracy for method '{}' on dataset '{}'", methods[m], datasets[d]),
                    )
                })?;
            }
        }
        Self::new(methods, datasets, accuracy)
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn datasets(&self) -> &[String] {
        &self.datasets
    }

    pub fn accuracy(&self) -> &DMatrix<f64> {
        &self.accuracy
    }

    /// Per-dataset ranks (methods × datasets); rank 1 is the highest
    /// accuracy, tied methods share the average of their positions.
    pub fn dataset_ranks(&self) -> DMatrix<f64> {
        let k = self.methods.len();
        let mut ranks = DMatrix::zeros(k, self.datasets.len());
        for d in 0..self.datasets.len() {
            let col: Vec<f64> = self.accuracy.column(d).iter().copied().collect();
            for (m, r) in average_ranks(&col).into_iter().enumerate() {
                ranks[(m, d)] = r;
            }
        }
        ranks
    }
}

/// Ranks in descending order of `values`, ties averaged.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank mean(i+1..=j+1)
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mean rank of every method across datasets, keyed by method name.
pub fn mean_ranks(t: &AccuracyTable) -> BTreeMap<String, f64> {
    let ranks = t.dataset_ranks();
    t.methods
        .iter()
        .enumerate()
        .map(|(m, name)| (name.clone(), ranks.row(m).mean()))
        .collect()
}

/// `method,mean_rank` in table method order.
pub fn write_ranks_csv(t: &AccuracyTable, path: &Path) -> Result<()> {
    let ranks = mean_ranks(t);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "mean_rank"])?;
    for m in &t.methods {
        w.write_record([m.as_str(), &crate::fmt_f64(ranks[m])])?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned plain-text report, best mean rank first.
pub fn render_table(t: &AccuracyTable) -> String {
    let ranks = mean_ranks(t);
    let mut rows: Vec<(&String, f64)> = t.methods.iter().map(|m| (m, ranks[m])).collect();
    rows.sort_by(|a, b| a.1.total_cmp(&b.1));
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max("method".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  mean rank", "method");
    for (m, r) in rows {
        let _ = writeln!(out, "{m:<width$}  {r:>9.4}");
    }
    let _ = writeln!(out, "({} datasets)", t.datasets.len());
    out
}
