//! Variational parameters, the training objective and its Euclidean
//! gradients.
//!
//! For training point n with label y and competitor class t, write
//! κ_n for row n of κ, d_n = κ_n(μ_t − μ_y), s_{j,n} = κ_n Σ_j κ_nᵀ and
//!
//! ```text
//! Q_n = 2 K̃_nn + (1 + d_n)² + s_{t,n} + s_{y,n}
//! ```
//!
//! The objective is
//!
//! ```text
//! O = Σ_n [ −(Q_n − α_n) / (2√α_n) − d_n + ¼ log α_n + log K½(√α_n) ]
//!     − ½ Σ_j ( −log|Σ_j| + tr(K_PP⁻¹ Σ_j) + μ_jᵀ K_PP⁻¹ μ_j )
//! ```
//!
//! whose α-derivative is `Q_n / (4 α_n^{3/2}) − 1 / (4 √α_n)`, zero at α_n = Q_n.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{InducingInputs, KernelCache, KernelHyperparams};
use crate::special::{log_bessel_k_half_unchecked, ALPHA_FLOOR};

/// Means, Cholesky factors of the covariances of q(u_j) and the GIG
/// parameters α_n of q(λ_n).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    /// C×P, row j is μ_j.
    pub mu: DMatrix<f64>,
    /// Lower-triangular L_j with Σ_j = L_j L_jᵀ.
    pub chol_sigma: Vec<DMatrix<f64>>,
    pub alpha: DVector<f64>,
}

impl VariationalParams {
    /// μ_j = 0, Σ_j = I, α_n = 1.
    pub fn init(n_classes: usize, n_inducing: usize, n_data: usize) -> Self {
        Self {
            mu: DMatrix::zeros(n_classes, n_inducing),
            chol_sigma: vec![DMatrix::identity(n_inducing, n_inducing); n_classes],
            alpha: DVector::from_element(n_data, 1.0),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.mu.nrows()
    }

    pub fn n_inducing(&self) -> usize {
        self.mu.ncols()
    }

    pub fn sigma(&self, j: usize) -> DMatrix<f64> {
        let l = &self.chol_sigma[j];
        l * l.transpose()
    }

    pub fn mean(&self, j: usize) -> DVector<f64> {
        self.mu.row(j).transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, p) = self.mu.shape();
        if self.chol_sigma.len() != c {
            return Err(Error::Config(format!(
                "{} covariance factors for {c} classes",
                self.chol_sigma.len()
            )));
        }
        for (j, l) in self.chol_sigma.iter().enumerate() {
            if l.shape() != (p, p) {
                return Err(Error::Config(format!("factor {j} has shape {:?}", l.shape())));
            }
            if !l.diagonal().iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(Error::Numerical(format!(
                    "covariance factor of class {j} has a non-positive diagonal"
                )));
            }
        }
        if let Some(n) = self.alpha.iter().position(|a| !(a.is_finite() && *a >= ALPHA_FLOOR)) {
            return Err(Error::Numerical(format!(
                "alpha[{n}] = {} is below the floor {ALPHA_FLOOR:e}",
                self.alpha[n]
            )));
        }
        Ok(())
    }
}

/// η_{1,j} = Σ_j⁻¹μ_j and η_{2,j} = −½Σ_j⁻¹ for every class.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    pub eta1: DMatrix<f64>,
    pub eta2: Vec<DMatrix<f64>>,
}

impl NaturalParams {
    pub fn from_variational(vp: &VariationalParams) -> Result<Self> {
        let c = vp.n_classes();
        let mut eta1 = DMatrix::zeros(c, vp.n_inducing());
        let mut eta2 = Vec::with_capacity(c);
        for j in 0..c {
            let (e1, e2) = to_natural(&vp.chol_sigma[j], &vp.mean(j))?;
            eta1.set_row(j, &e1.transpose());
            eta2.push(e2);
        }
        Ok(Self { eta1, eta2 })
    }

    /// Overwrites μ and the covariance factors of `vp`; α is left untouched.
    pub fn write_into(&self, vp: &mut VariationalParams) -> Result<()> {
        for j in 0..self.eta2.len() {
            let (l, mu) = from_natural(&self.eta1.row(j).transpose(), &self.eta2[j])
                .ok_or_else(|| Error::Numerical(format!("−2η₂ of class {j} is not positive definite")))?;
            vp.chol_sigma[j] = l;
            vp.mu.set_row(j, &mu.transpose());
        }
        Ok(())
    }
}

pub(crate) fn to_natural(l: &DMatrix<f64>, mu: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = l.nrows();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Numerical("singular covariance factor".into()))?;
    let prec = l_inv.transpose() * &l_inv;
    let prec = symmetrize(&prec);
    let eta1 = &prec * mu;
    Ok((eta1, prec * -0.5))
}

/// Recovers (chol(Σ), μ) from natural parameters; `None` if −2η₂ is not
/// positive definite.
pub(crate) fn from_natural(eta1: &DVector<f64>, eta2: &DMatrix<f64>) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let prec = symmetrize(&(eta2 * -2.0));
    let chol = nalgebra::Cholesky::new(prec)?;
    let p = eta2.nrows();
    let sigma = symmetrize(&chol.solve(&DMatrix::identity(p, p)));
    let mu = chol.solve(eta1);
    let l = nalgebra::Cholesky::new(sigma)?.l();
    if !l.iter().all(|v| v.is_finite()) || !mu.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some((l, mu))
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Kernel hyperparameters, inducing inputs, variational parameters and the
/// kernel cache for one training set.
#[derive(Debug, Clone)]
pub struct ModelState {
    hyper: KernelHyperparams,
    inducing: InducingInputs,
    pub vp: VariationalParams,
    n_classes: usize,
    cache: KernelCache,
    stale: bool,
}

impl ModelState {
    /// Builds the cache for `x` and initializes the variational parameters.
    pub fn new(
        x: &DMatrix<f64>,
        hyper: KernelHyperparams,
        inducing: InducingInputs,
        n_classes: usize,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(format!("at least 2 classes are required, got {n_classes}")));
        }
        let cache = KernelCache::build(x, &inducing, &hyper)?;
        let vp = VariationalParams::init(n_classes, inducing.len(), x.nrows());
        Ok(Self {
            hyper,
            inducing,
            vp,
            n_classes,
            cache,
            stale: false,
        })
    }

    /// Median-heuristic hyperparameters and k-means inducing inputs.
    pub fn initialize(
        x: &DMatrix<f64>,
        n_classes: usize,
        n_inducing: usize,
        ard: bool,
        seed: u64,
    ) -> Result<Self> {
        let hyper = KernelHyperparams::median_heuristic(x, ard, seed)?;
        let inducing = InducingInputs::kmeans(x, n_inducing, seed)?;
        Self::new(x, hyper, inducing, n_classes)
    }

    /// Replaces the variational parameters after checking shapes.
    pub fn with_params(mut self, vp: VariationalParams) -> Result<Self> {
        if vp.mu.shape() != self.vp.mu.shape() || vp.alpha.len() != self.vp.alpha.len() {
            return Err(Error::Config("variational parameter shapes do not match the state".into()));
        }
        vp.validate()?;
        self.vp = vp;
        Ok(self)
    }

    pub fn hyper(&self) -> &KernelHyperparams {
        &self.hyper
    }

    pub fn inducing(&self) -> &InducingInputs {
        &self.inducing
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_data(&self) -> usize {
        self.vp.alpha.len()
    }

    pub fn is_stale(&self) -> bool {
        self.stale
    }

    pub fn cache(&self) -> Result<&KernelCache> {
        if self.stale {
            return Err(Error::StaleCache);
        }
        Ok(&self.cache)
    }

    pub fn set_hyper(&mut self, hyper: KernelHyperparams) -> Result<()> {
        hyper.validate()?;
        self.hyper = hyper;
        self.stale = true;
        Ok(())
    }

    pub fn set_inducing(&mut self, inducing: InducingInputs) -> Result<()> {
        if inducing.len() != self.inducing.len() || inducing.dims() != self.inducing.dims() {
            return Err(Error::Config("inducing inputs must keep their shape".into()));
        }
        self.inducing = inducing;
        self.stale = true;
        Ok(())
    }

    pub fn rebuild_cache(&mut self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.n_data() {
            return Err(Error::Input(format!(
                "cache rebuild with {} rows for a state over {} points",
                x.nrows(),
                self.n_data()
            )));
        }
        self.cache = KernelCache::build(x, &self.inducing, &self.hyper)?;
        self.stale = false;
        Ok(())
    }

    /// Posterior means κ_n μ_j of every class at training point n.
    pub fn train_means(&self) -> Result<DMatrix<f64>> {
        Ok(self.cache()?.kappa() * self.vp.mu.transpose())
    }
}

fn check_labels(state: &ModelState, labels: &[usize]) -> Result<()> {
    if state.n_classes < 2 {
        return Err(Error::Config("competitor class needs at least 2 classes".into()));
    }
    if labels.len() != state.n_data() {
        return Err(Error::Input(format!(
            "{} labels for {} training points",
            labels.len(),
            state.n_data()
        )));
    }
    if let Some(n) = labels.iter().position(|&y| y >= state.n_classes) {
        return Err(Error::Input(format!("label {} at row {n} is out of range", labels[n])));
    }
    Ok(())
}

fn argmax_excluding(row: impl Iterator<Item = f64>, skip: usize) -> usize {
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (t, v) in row.enumerate() {
        if t != skip && (best.1 == usize::MAX || v > best.0) {
            best = (v, t);
        }
    }
    best.1
}

/// t_n = argmax_{t ≠ y_n} κ_n μ_t, ties to the smallest class index.
pub fn competitor_class(state: &ModelState, labels: &[usize], n: usize) -> Result<usize> {
    check_labels(state, labels)?;
    if n >= labels.len() {
        return Err(Error::Input(format!("training index {n} out of range")));
    }
    let k = state.cache()?.kappa().row(n);
    let means = (0..state.n_classes).map(|t| k.dot(&state.vp.mu.row(t)));
    Ok(argmax_excluding(means, labels[n]))
}

/// Competitor classes for every training point.
pub fn competitor_classes(state: &ModelState, labels: &[usize]) -> Result<Vec<usize>> {
    check_labels(state, labels)?;
    let means = state.train_means()?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(n, &y)| argmax_excluding(means.row(n).iter().copied(), y))
        .collect())
}

/// The objective and its gradients at one state, with the competitor classes
/// held fixed.
///
/// The data sum may be restricted to a minibatch, in which case it is scaled
/// by `scale` (normally N/|B|) while the prior term is kept whole.
pub struct Objective<'a> {
    state: &'a ModelState,
    cache: &'a KernelCache,
    labels: &'a [usize],
    competitors: Vec<usize>,
    rows: Vec<usize>,
    scale: f64,
    // per-row quantities, aligned with `rows`
    kappa_rows: Vec<DVector<f64>>,
    margin: Vec<f64>,
    q: Vec<f64>,
}

impl<'a> Objective<'a> {
    /// Full batch with freshly computed competitor classes.
    pub fn new(state: &'a ModelState, labels: &'a [usize]) -> Result<Self> {
        let comp = competitor_classes(state, labels)?;
        Self::with_competitors(state, labels, comp)
    }

    pub fn with_competitors(state: &'a ModelState, labels: &'a [usize], competitors: Vec<usize>) -> Result<Self> {
        let rows = (0..labels.len()).collect();
        Self::batch(state, labels, competitors, rows, 1.0)
    }

    pub fn batch(
        state: &'a ModelState,
        labels: &'a [usize],
        competitors: Vec<usize>,
        rows: Vec<usize>,
        scale: f64,
    ) -> Result<Self> {
        check_labels(state, labels)?;
        if competitors.len() != labels.len() {
            return Err(Error::Input("competitor list length differs from labels".into()));
        }
        for (n, (&t, &y)) in competitors.iter().zip(labels).enumerate() {
            if t == y || t >= state.n_classes {
                return Err(Error::Input(format!("invalid competitor class {t} for row {n}")));
            }
        }
        if let Some(&n) = rows.iter().find(|&&n| n >= labels.len()) {
            return Err(Error::Input(format!("batch row {n} out of range")));
        }
        let cache = state.cache()?;
        let vp = &state.vp;
        if vp.n_inducing() != cache.p() {
            return Err(Error::Config("inducing dimension of parameters differs from cache".into()));
        }
        let mut kappa_rows = Vec::with_capacity(rows.len());
        let mut margin = Vec::with_capacity(rows.len());
        let mut q = Vec::with_capacity(rows.len());
        for &n in &rows {
            let k = cache.kappa().row(n).transpose();
            let (t, y) = (competitors[n], labels[n]);
            let d = k.dot(&(vp.mu.row(t) - vp.mu.row(y)).transpose());
            let s_t = (vp.chol_sigma[t].transpose() * &k).norm_squared();
            let s_y = (vp.chol_sigma[y].transpose() * &k).norm_squared();
            q.push(2.0 * cache.ktilde_diag()[n] + (1.0 + d) * (1.0 + d) + s_t + s_y);
            margin.push(d);
            kappa_rows.push(k);
        }
        Ok(Self {
            state,
            cache,
            labels,
            competitors,
            rows,
            scale,
            kappa_rows,
            margin,
            q,
        })
    }

    pub fn competitors(&self) -> &[usize] {
        &self.competitors
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Q_n for every row of the batch (same order as [`Self::rows`]).
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    fn alpha(&self, i: usize) -> f64 {
        self.state.vp.alpha[self.rows[i]]
    }

    /// −½ (−log|Σ_j| + tr(K_PP⁻¹Σ_j) + μ_jᵀK_PP⁻¹μ_j) for class j.
    pub fn prior_term(&self, j: usize) -> f64 {
        let vp = &self.state.vp;
        let f = self.cache.factor();
        let l = &vp.chol_sigma[j];
        let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let trace = f.solve_lower(l).norm_squared();
        let quad = f.solve_lower_vec(&vp.mean(j)).norm_squared();
        -0.5 * (-logdet + trace + quad)
    }

    /// Contribution of batch row i to the data sum (before scaling).
    pub fn data_term(&self, i: usize) -> f64 {
        let a = self.alpha(i);
        let sa = a.sqrt();
        -(self.q[i] - a) / (2.0 * sa) - self.margin[i] + 0.25 * a.ln() + log_bessel_k_half_unchecked(sa)
    }

    pub fn value(&self) -> Result<f64> {
        let mut data = 0.0;
        for i in 0..self.rows.len() {
            let v = self.data_term(i);
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "objective term of training point {} is {v}",
                    self.rows[i]
                )));
            }
            data += v;
        }
        let mut prior = 0.0;
        for j in 0..self.state.n_classes {
            let v = self.prior_term(j);
            if !v.is_finite() {
                return Err(Error::Numerical(format!("prior term of class {j} is {v}")));
            }
            prior += v;
        }
        Ok(self.scale * data + prior)
    }

    /// ∂O/∂μ, C×P.
    pub fn grad_mu(&self) -> Result<DMatrix<f64>> {
        let vp = &self.state.vp;
        let f = self.cache.factor();
        let mut g = -f.solve(&vp.mu.transpose()).transpose();
        for (i, &n) in self.rows.iter().enumerate() {
            let w = 1.0 / self.alpha(i).sqrt();
            let coef = self.scale * (w * (1.0 + self.margin[i]) + 1.0);
            let k = &self.kappa_rows[i];
            let (t, y) = (self.competitors[n], self.labels[n]);
            for p in 0..k.len() {
                g[(t, p)] -= coef * k[p];
                g[(y, p)] += coef * k[p];
            }
        }
        check_finite(g.iter(), "grad_mu")?;
        Ok(g)
    }

    /// G_j = ∂O/∂Σ_j treating Σ_j as an unconstrained symmetric matrix.
    pub fn grad_sigma(&self) -> Result<Vec<DMatrix<f64>>> {
        let vp = &self.state.vp;
        let f = self.cache.factor();
        let p = vp.n_inducing();
        let kinv = f.inverse();
        let mut out = Vec::with_capacity(self.state.n_classes);
        for j in 0..self.state.n_classes {
            let l = &vp.chol_sigma[j];
            let l_inv = l
                .solve_lower_triangular(&DMatrix::identity(p, p))
                .ok_or_else(|| Error::Numerical(format!("singular covariance factor for class {j}")))?;
            let sigma_inv = l_inv.transpose() * l_inv;
            out.push((sigma_inv - &kinv) * 0.5);
        }
        for (i, &n) in self.rows.iter().enumerate() {
            let w = 0.5 * self.scale / self.alpha(i).sqrt();
            let k = &self.kappa_rows[i];
            let kk = k * k.transpose();
            for j in [self.competitors[n], self.labels[n]] {
                out[j] -= &kk * w;
            }
        }
        for (j, g) in out.iter_mut().enumerate() {
            *g = symmetrize(g);
            check_finite(g.iter(), &format!("grad_sigma[{j}]"))?;
        }
        Ok(out)
    }

    /// ∂O/∂L_j: lower triangle of (G_j + G_jᵀ) L_j.
    pub fn grad_chol_sigma(&self) -> Result<Vec<DMatrix<f64>>> {
        let g = self.grad_sigma()?;
        Ok(g
            .iter()
            .zip(&self.state.vp.chol_sigma)
            .map(|(g, l)| ((g + g.transpose()) * l).lower_triangle())
            .collect())
    }

    /// ∂O/∂α_n = Q_n / (4 α_n^{3/2}) − 1 / (4 √α_n); zero outside the batch.
    pub fn grad_alpha(&self) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(self.labels.len());
        for (i, &n) in self.rows.iter().enumerate() {
            let a = self.alpha(i);
            let sa = a.sqrt();
            g[n] = self.scale * (self.q[i] / (4.0 * a * sa) - 1.0 / (4.0 * sa));
        }
        check_finite(g.iter(), "grad_alpha")?;
        Ok(g)
    }

    /// α_n = Q_n (floored) for batch rows; other entries keep their value.
    pub fn alpha_closed_form(&self) -> DVector<f64> {
        let mut a = self.state.vp.alpha.clone();
        for (i, &n) in self.rows.iter().enumerate() {
            a[n] = self.q[i].max(ALPHA_FLOOR);
        }
        a
    }

    /// Natural gradients (∂O/∂μ_j − 2 G_j μ_j, G_j) for every class.
    pub fn natural_gradients(&self) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let gm = self.grad_mu()?;
        let gs = self.grad_sigma()?;
        let vp = &self.state.vp;
        let mut g1 = gm;
        for (j, g) in gs.iter().enumerate() {
            let corr = g * vp.mean(j) * 2.0;
            for p in 0..corr.len() {
                g1[(j, p)] -= corr[p];
            }
        }
        Ok((g1, gs))
    }
}

fn check_finite<'b>(mut it: impl Iterator<Item = &'b f64>, what: &str) -> Result<()> {
    if it.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} has non-finite entries")))
    }
}

/// Objective at `state` with competitor classes recomputed from the current
/// posterior means.
pub fn elbo(state: &ModelState, labels: &[usize]) -> Result<f64> {
    Objective::new(state, labels)?.value()
}

pub fn grad_mu(state: &ModelState, labels: &[usize]) -> Result<DMatrix<f64>> {
    Objective::new(state, labels)?.grad_mu()
}

pub fn grad_chol_sigma(state: &ModelState, labels: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    Objective::new(state, labels)?.grad_chol_sigma()
}

pub fn grad_alpha(state: &ModelState, labels: &[usize]) -> Result<DVector<f64>> {
    Objective::new(state, labels)?.grad_alpha()
}

pub fn alpha_closed_form(state: &ModelState, labels: &[usize]) -> Result<DVector<f64>> {
    Ok(Objective::new(state, labels)?.alpha_closed_form())
}
