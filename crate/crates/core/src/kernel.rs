//! RBF kernel, inducing-input initialization and the sparse-GP matrix cache
//! shared by all class processes.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_JITTER: f64 = 1e-6;
/// Jitter is doubled on Cholesky failure until it exceeds this value.
pub const MAX_JITTER: f64 = 1e-2;
/// Entries of diag(K̃) down to this value are rounding noise and clamp to 0.
pub const KTILDE_TOLERANCE: f64 = 1e-8;

const MEDIAN_SUBSAMPLE: usize = 256;
const KMEANS_ITERATIONS: usize = 25;
const DUPLICATE_TOLERANCE: f64 = 1e-12;
const DUPLICATE_PERTURBATION: f64 = 1e-6;

/// Squared-exponential kernel hyperparameters.
///
/// `lengthscales` holds either one shared value or one value per input
/// dimension (ARD).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub jitter: f64,
}

impl KernelHyperparams {
    pub fn new(lengthscales: Vec<f64>, signal_variance: f64, jitter: f64) -> Result<Self> {
        let h = Self {
            lengthscales,
            signal_variance,
            jitter,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn isotropic(lengthscale: f64, signal_variance: f64) -> Result<Self> {
        Self::new(vec![lengthscale], signal_variance, DEFAULT_JITTER)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if self.lengthscales.is_empty() || !self.lengthscales.iter().all(|&l| ok(l)) {
            return Err(Error::Config(format!(
                "lengthscales must be non-empty and strictly positive, got {:?}",
                self.lengthscales
            )));
        }
        if !ok(self.signal_variance) {
            return Err(Error::Config(format!(
                "signal variance must be > 0, got {}",
                self.signal_variance
            )));
        }
        if !ok(self.jitter) {
            return Err(Error::Config(format!("jitter must be > 0, got {}", self.jitter)));
        }
        Ok(())
    }

    pub fn is_ard(&self) -> bool {
        self.lengthscales.len() > 1
    }

    fn check_dims(&self, dims: usize) -> Result<()> {
        if self.is_ard() && self.lengthscales.len() != dims {
            return Err(Error::Input(format!(
                "{} ARD lengthscales for {dims}-dimensional inputs",
                self.lengthscales.len()
            )));
        }
        Ok(())
    }

    #[inline]
    fn lengthscale(&self, d: usize) -> f64 {
        if self.is_ard() {
            self.lengthscales[d]
        } else {
            self.lengthscales[0]
        }
    }

    /// Kernel value for two points given as iterators over coordinates.
    /// Assumes dimensions were already checked.
    #[inline]
    pub(crate) fn eval_iter<'a>(
        &self,
        a: impl Iterator<Item = &'a f64>,
        b: impl Iterator<Item = &'a f64>,
    ) -> f64 {
        let mut r2 = 0.0;
        for (d, (x1, x2)) in a.zip(b).enumerate() {
            let t = (x1 - x2) / self.lengthscale(d);
            r2 += t * t;
        }
        self.signal_variance * (-0.5 * r2).exp()
    }

    /// Median heuristic: all lengthscales set to the median pairwise
    /// Euclidean distance of a seeded subsample of at most 256 rows.
    pub fn median_heuristic(x: &DMatrix<f64>, ard: bool, seed: u64) -> Result<Self> {
        let n = x.nrows();
        if n == 0 || x.ncols() == 0 {
            return Err(Error::Input("median heuristic needs a non-empty matrix".into()));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        if n > MEDIAN_SUBSAMPLE {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            idx.truncate(MEDIAN_SUBSAMPLE);
            idx.sort_unstable();
        }
        let mut dists = Vec::with_capacity(idx.len() * idx.len().saturating_sub(1) / 2);
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                let d2: f64 = x
                    .row(i)
                    .iter()
                    .zip(x.row(j).iter())
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                dists.push(d2.sqrt());
            }
        }
        let mut ls = if dists.is_empty() {
            1.0
        } else {
            dists.sort_by(f64::total_cmp);
            let m = dists.len();
            if m % 2 == 1 {
                dists[m / 2]
            } else {
                0.5 * (dists[m / 2 - 1] + dists[m / 2])
            }
        };
        if !(ls.is_finite() && ls > 0.0) {
            ls = 1.0;
        }
        let lengthscales = if ard { vec![ls; x.ncols()] } else { vec![ls] };
        Self::new(lengthscales, 1.0, DEFAULT_JITTER)
    }
}

/// RBF value `σ² · exp(−½ Σ_d (x1_d − x2_d)² / ℓ_d²)`.
pub fn eval_kernel(x1: &[f64], x2: &[f64], h: &KernelHyperparams) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::Input(format!(
            "kernel arguments have dimensions {} and {}",
            x1.len(),
            x2.len()
        )));
    }
    h.check_dims(x1.len())?;
    if !x1.iter().chain(x2).all(|v| v.is_finite()) {
        return Err(Error::Domain("kernel arguments must be finite".into()));
    }
    Ok(h.eval_iter(x1.iter(), x2.iter()))
}

/// Cross-kernel matrix between the rows of `a` and the rows of `b`.
pub fn kernel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, h: &KernelHyperparams) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Input(format!(
            "column mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    h.check_dims(a.ncols())?;
    // Row-major copies so each kernel evaluation walks contiguous memory.
    let ar = a.transpose();
    let br = b.transpose();
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        h.eval_iter(ar.column(i).iter(), br.column(j).iter())
    }))
}

/// P×M inducing input locations shared across all class processes.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingInputs(DMatrix<f64>);

impl InducingInputs {
    pub fn new(z: DMatrix<f64>) -> Result<Self> {
        if z.nrows() == 0 || z.ncols() == 0 {
            return Err(Error::Config("at least one inducing point is required".into()));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("inducing inputs must be finite".into()));
        }
        Ok(Self(z))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// k-means centroids (seeded initialization, 25 Lloyd iterations).
    ///
    /// With `k ≥ N` the points themselves are returned. Rows that coincide
    /// with an earlier row are nudged apart by 1e-6 so that no two inducing
    /// inputs are identical.
    pub fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64) -> Result<Self> {
        let n = x.nrows();
        if k == 0 {
            return Err(Error::Config("number of inducing points must be >= 1".into()));
        }
        if n == 0 {
            return Err(Error::Input("cannot place inducing points without data".into()));
        }
        let mut centers = if k >= n {
            x.clone()
        } else {
            lloyd(x, k, seed)
        };
        separate_duplicates(&mut centers);
        Self::new(centers)
    }
}

fn lloyd(x: &DMatrix<f64>, k: usize, seed: u64) -> DMatrix<f64> {
    let (n, m) = x.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut centers = DMatrix::from_fn(k, m, |i, d| x[(order[i], d)]);
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERATIONS {
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let d2: f64 = (0..m).map(|d| (x[(i, d)] - centers[(c, d)]).powi(2)).sum();
                if d2 < best.0 {
                    best = (d2, c);
                }
            }
            *a = best.1;
        }
        let mut sums = DMatrix::<f64>::zeros(k, m);
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for d in 0..m {
                sums[(c, d)] += x[(i, d)];
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                for d in 0..m {
                    centers[(c, d)] = sums[(c, d)] / counts[c] as f64;
                }
            }
        }
    }
    centers
}

fn separate_duplicates(z: &mut DMatrix<f64>) {
    let (p, m) = z.shape();
    for i in 1..p {
        let mut bumps = 0usize;
        loop {
            let clash = (0..i).any(|j| {
                (0..m).all(|d| (z[(i, d)] - z[(j, d)]).abs() <= DUPLICATE_TOLERANCE)
            });
            if !clash {
                break;
            }
            bumps += 1;
            let d = (i + bumps) % m;
            z[(i, d)] += DUPLICATE_PERTURBATION * bumps as f64;
        }
    }
}

/// Jittered K_PP and its Cholesky factor. Enough to make predictions
/// without the training inputs.
#[derive(Debug, Clone)]
pub struct InducingFactor {
    k_pp: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl InducingFactor {
    pub fn build(z: &InducingInputs, h: &KernelHyperparams) -> Result<Self> {
        h.validate()?;
        let k_pp = kernel_matrix(z.matrix(), z.matrix(), h)?;
        let p = k_pp.nrows();
        let mut jitter = h.jitter;
        loop {
            let shifted = &k_pp + DMatrix::<f64>::identity(p, p) * jitter;
            // pivots below the rounding level of the largest entry are noise
            let floor = 2.0 * p as f64 * f64::EPSILON * (h.signal_variance + jitter);
            if let Some(chol) = Cholesky::new(shifted) {
                if chol.l_dirty().diagonal().iter().all(|v| v.is_finite() && v * v > floor) {
                    return Ok(Self { k_pp, chol, jitter });
                }
            }
            if jitter >= MAX_JITTER {
                return Err(Error::SingularKernel {
                    jitter,
                    pairs: near_duplicates(&k_pp, h.signal_variance),
                });
            }
            jitter = (jitter * 2.0).min(MAX_JITTER);
        }
    }

    /// K_PP without jitter.
    pub fn k_pp(&self) -> &DMatrix<f64> {
        &self.k_pp
    }

    /// Jitter actually used (after escalation).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular L with L·Lᵀ = K_PP + jitter·I.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn p(&self) -> usize {
        self.k_pp.nrows()
    }

    /// (K_PP + jitter·I)⁻¹ · b via two triangular solves.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// L⁻¹ · b.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// (K_PP + jitter·I)⁻¹ formed from the factor.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

fn near_duplicates(k_pp: &DMatrix<f64>, signal_variance: f64) -> Vec<(usize, usize)> {
    let p = k_pp.nrows();
    let mut pairs = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            if k_pp[(i, j)] >= signal_variance * (1.0 - 1e-6) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// K_PP (factored), K_NP, κ = K_NP·K_PP⁻¹ and diag(K̃) for one set of
/// training inputs.
#[derive(Debug, Clone)]
pub struct KernelCache {
    factor: InducingFactor,
    k_np: DMatrix<f64>,
    kappa: DMatrix<f64>,
    ktilde_diag: DVector<f64>,
}

impl KernelCache {
    pub fn build(x: &DMatrix<f64>, z: &InducingInputs, h: &KernelHyperparams) -> Result<Self> {
        if x.ncols() != z.dims() {
            return Err(Error::Input(format!(
                "data has {} columns but inducing inputs have {}",
                x.ncols(),
                z.dims()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("training inputs must be finite".into()));
        }
        let factor = InducingFactor::build(z, h)?;
        let k_np = kernel_matrix(x, z.matrix(), h)?;
        let kappa = factor.solve(&k_np.transpose()).transpose();
        let n = x.nrows();
        let mut ktilde_diag = DVector::zeros(n);
        for i in 0..n {
            let q = k_np.row(i).dot(&kappa.row(i));
            let v = h.signal_variance - q;
            if v < -KTILDE_TOLERANCE * h.signal_variance.max(1.0) {
                return Err(Error::Numerical(format!(
                    "diag(K̃)[{i}] = {v:e} is negative beyond tolerance"
                )));
            }
            ktilde_diag[i] = v.max(0.0);
        }
        Ok(Self {
            factor,
            k_np,
            kappa,
            ktilde_diag,
        })
    }

    pub fn factor(&self) -> &InducingFactor {
        &self.factor
    }

    pub fn k_np(&self) -> &DMatrix<f64> {
        &self.k_np
    }

    pub fn kappa(&self) -> &DMatrix<f64> {
        &self.kappa
    }

    pub fn ktilde_diag(&self) -> &DVector<f64> {
        &self.ktilde_diag
    }

    pub fn n(&self) -> usize {
        self.k_np.nrows()
    }

    pub fn p(&self) -> usize {
        self.k_np.ncols()
    }
}
