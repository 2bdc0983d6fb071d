//! JSON model files.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::kernel::{InducingInputs, KernelHyperparams};
use crate::model::ModelState;
use crate::predict::Predictor;

pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to predict on raw feature files: kernel, inducing
/// inputs, q(u), the feature scaling and the original label names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub hyper: KernelHyperparams,
    pub inducing: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub chol_sigma: Vec<Vec<Vec<f64>>>,
    pub alpha: Vec<f64>,
    pub n_classes: usize,
    pub label_names: Vec<String>,
    pub label_column: String,
    pub feature_names: Vec<String>,
    pub standardization: Standardization,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Input(format!("model file: ragged {what}")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl ModelFile {
    /// `train` supplies the label names, feature names and scaling the state
    /// was trained under.
    pub fn from_state(state: &ModelState, train: &Dataset) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            hyper: state.hyper().clone(),
            inducing: rows(state.inducing().matrix()),
            mu: rows(&state.vp.mu),
            chol_sigma: state.vp.chol_sigma.iter().map(rows).collect(),
            alpha: state.vp.alpha.iter().copied().collect(),
            n_classes: state.n_classes(),
            label_names: train.label_names.clone(),
            label_column: train.label_column.clone(),
            feature_names: train.feature_names.clone(),
            standardization: train.scaling.clone(),
        }
    }

    pub fn predictor(&self) -> Result<Predictor> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Input(format!("unsupported model format version {}", self.format_version)));
        }
        let m = self.feature_names.len();
        let p = self.inducing.len();
        if self.label_names.len() != self.n_classes || self.mu.len() != self.n_classes {
            return Err(Error::Input("model file: class count mismatch".into()));
        }
        if self.standardization.means.len() != m || self.standardization.stds.len() != m {
            return Err(Error::Input("model file: standardization does not match the features".into()));
        }
        let z = InducingInputs::new(matrix(&self.inducing, m, "inducing inputs")?)?;
        let mu = matrix(&self.mu, p, "means")?;
        let chol = self
            .chol_sigma
            .iter()
            .map(|l| {
                if l.len() != p {
                    return Err(Error::Input("model file: covariance factor has the wrong size".into()));
                }
                matrix(l, p, "covariance factor")
            })
            .collect::<Result<Vec<_>>>()?;
        Predictor::new(self.hyper.clone(), z, mu, chol)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
