//! Posterior predictive marginals, the argmax decision rule and the
//! variation-ratio uncertainty score.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, InducingFactor, InducingInputs, KernelHyperparams};
use crate::model::ModelState;

pub const DEFAULT_VR_SAMPLES: usize = 128;

/// Independent Gaussian marginals of every class decision function at every
/// test point (T×C).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub means: DMatrix<f64>,
    pub variances: DMatrix<f64>,
}

impl PredictiveDistribution {
    pub fn new(means: DMatrix<f64>, variances: DMatrix<f64>) -> Result<Self> {
        if means.shape() != variances.shape() {
            return Err(Error::Input("means and variances differ in shape".into()));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numerical("predictive moments must be finite with variances >= 0".into()));
        }
        Ok(Self { means, variances })
    }

    pub fn n_points(&self) -> usize {
        self.means.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.means.ncols()
    }
}

/// Everything needed to predict: kernel, inducing inputs with their factored
/// Gram matrix, and q(u_j) for every class.
#[derive(Debug, Clone)]
pub struct Predictor {
    hyper: KernelHyperparams,
    inducing: InducingInputs,
    factor: InducingFactor,
    mu: DMatrix<f64>,
    chol_sigma: Vec<DMatrix<f64>>,
}

impl Predictor {
    pub fn new(
        hyper: KernelHyperparams,
        inducing: InducingInputs,
        mu: DMatrix<f64>,
        chol_sigma: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let p = inducing.len();
        if mu.ncols() != p || chol_sigma.len() != mu.nrows() || chol_sigma.iter().any(|l| l.shape() != (p, p)) {
            return Err(Error::Config("posterior parameters do not match the inducing inputs".into()));
        }
        if mu.nrows() < 2 {
            return Err(Error::Config("at least 2 classes are required".into()));
        }
        let factor = InducingFactor::build(&inducing, &hyper)?;
        Ok(Self {
            hyper,
            inducing,
            factor,
            mu,
            chol_sigma,
        })
    }

    pub fn from_state(state: &ModelState) -> Result<Self> {
        let factor = state.cache()?.factor().clone();
        Ok(Self {
            hyper: state.hyper().clone(),
            inducing: state.inducing().clone(),
            factor,
            mu: state.vp.mu.clone(),
            chol_sigma: state.vp.chol_sigma.clone(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.mu.nrows()
    }

    pub fn dims(&self) -> usize {
        self.inducing.dims()
    }

    /// mean_j(x) = k_xP K_PP⁻¹ μ_j and
    /// var_j(x) = k(x,x) − k_xP K_PP⁻¹ k_Px + k_xP K_PP⁻¹ Σ_j K_PP⁻¹ k_Px,
    /// variances floored at the jitter.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        if x.ncols() != self.dims() {
            return Err(Error::Input(format!(
                "test data has {} features, model expects {}",
                x.ncols(),
                self.dims()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("test data contains non-finite values".into()));
        }
        let t = x.nrows();
        let c = self.n_classes();
        let k_pt = kernel_matrix(self.inducing.matrix(), x, &self.hyper)?;
        let a = self.factor.solve(&k_pt);
        let v = self.factor.solve_lower(&k_pt);
        let means = a.transpose() * self.mu.transpose();
        let floor = self.factor.jitter();
        let mut variances = DMatrix::zeros(t, c);
        for (j, l) in self.chol_sigma.iter().enumerate() {
            let b = l.transpose() * &a;
            for i in 0..t {
                let var = self.hyper.signal_variance - v.column(i).norm_squared() + b.column(i).norm_squared();
                variances[(i, j)] = var.max(floor);
            }
        }
        PredictiveDistribution::new(means, variances)
    }
}

pub fn predict_dist(state: &ModelState, x_test: &DMatrix<f64>) -> Result<PredictiveDistribution> {
    Predictor::from_state(state)?.predict(x_test)
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (j, v) in row.enumerate() {
        if j == 0 || v > best.0 {
            best = (v, j);
        }
    }
    best.1
}

/// Argmax of the class means, ties to the smallest class index.
pub fn decide(dist: &PredictiveDistribution) -> Vec<usize> {
    (0..dist.n_points())
        .map(|i| argmax(dist.means.row(i).iter().copied()))
        .collect()
}

/// 1 − F/S per test point, where F is the count of the modal class among
/// `samples` draws of the class vector from the independent marginals.
pub fn variation_ratio(dist: &PredictiveDistribution, samples: usize, seed: u64) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::Config("variation ratio needs at least one sample".into()));
    }
    let c = dist.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; c];
    let mut draw = vec![0.0; c];
    let mut out = Vec::with_capacity(dist.n_points());
    for i in 0..dist.n_points() {
        counts.iter_mut().for_each(|k| *k = 0);
        let sd: Vec<f64> = dist.variances.row(i).iter().map(|v| v.sqrt()).collect();
        for _ in 0..samples {
            for j in 0..c {
                let z: f64 = StandardNormal.sample(&mut rng);
                draw[j] = dist.means[(i, j)] + sd[j] * z;
            }
            counts[argmax(draw.iter().copied())] += 1;
        }
        let mode = *counts.iter().max().expect("at least one class");
        out.push(1.0 - mode as f64 / samples as f64);
    }
    Ok(out)
}

/// Row-wise softmax of the class means (temperature 1).
pub fn mean_softmax(dist: &PredictiveDistribution) -> DMatrix<f64> {
    let mut out = dist.means.clone();
    for mut row in out.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}
