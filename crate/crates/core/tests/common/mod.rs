//! Independent oracles: quadrature for the special functions, dense-inverse
//! reimplementations of the objective and the predictive moments, and
//! central finite differences.
#![allow(dead_code)]

use mcbsvm::data::Dataset;
use mcbsvm::model::ModelState;
use nalgebra::{DMatrix, DVector};

/// Composite Simpson rule on [a, b] with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// K_ν(x) = ∫₀^∞ exp(−x cosh t) cosh(νt) dt by quadrature.
pub fn bessel_k_quad(nu: f64, x: f64) -> f64 {
    // integrand is below 1e-300 once x cosh t > 700
    let upper = ((700.0 / x).max(1.0)).acosh() + 1.0;
    simpson(|t| (-x * t.cosh()).exp() * (nu * t).cosh(), 0.0, upper, 20_000)
}

/// Moments E[λ^k] of GIG(½, 1, α) by quadrature of the unnormalized density
/// λ^{−½} exp(−(λ + α/λ)/2) in the variable s = log λ.
pub fn gig_moment_quad(alpha: f64, k: f64) -> f64 {
    let dens = |s: f64, k: f64| {
        let l = s.exp();
        // λ^{p−1} dλ = λ^{p} ds
        (l.ln() * (0.5 + k) - 0.5 * (l + alpha / l)).exp()
    };
    let (a, b) = (alpha.ln().min(0.0) - 30.0, alpha.ln().max(0.0) + 30.0);
    let z = simpson(|s| dens(s, 0.0), a, b, 40_000);
    simpson(|s| dens(s, k), a, b, 40_000) / z
}

pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn rbf(a: &[f64], b: &[f64], ls: &[f64], sv: f64) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .enumerate()
        .map(|(d, (x, y))| {
            let l = if ls.len() == 1 { ls[0] } else { ls[d] };
            ((x - y) / l).powi(2)
        })
        .sum();
    sv * (-0.5 * r2).exp()
}

fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>, ls: &[f64], sv: f64) -> DMatrix<f64> {
    let ra: Vec<Vec<f64>> = a.row_iter().map(|r| r.iter().copied().collect()).collect();
    let rb: Vec<Vec<f64>> = b.row_iter().map(|r| r.iter().copied().collect()).collect();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| rbf(&ra[i], &rb[j], ls, sv))
}

/// Jittered K_PP and its explicit inverse.
fn dense_prior(state: &ModelState) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = state.hyper();
    let z = state.inducing().matrix();
    let p = z.nrows();
    let jitter = state.cache().unwrap().factor().jitter();
    let k = gram(z, z, &h.lengthscales, h.signal_variance) + DMatrix::identity(p, p) * jitter;
    let kinv = k.clone().try_inverse().expect("invertible K_PP");
    (k, kinv)
}

/// The objective evaluated with explicit inverses and determinants; competitor
/// classes are recomputed from the dense means.
pub fn dense_elbo(state: &ModelState, x: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let h = state.hyper();
    let z = state.inducing().matrix();
    let (_, kinv) = dense_prior(state);
    let k_np = gram(x, z, &h.lengthscales, h.signal_variance);
    let kappa = &k_np * &kinv;
    let vp = &state.vp;
    let c = vp.mu.nrows();
    let sigmas: Vec<DMatrix<f64>> = vp.chol_sigma.iter().map(|l| l * l.transpose()).collect();
    let mut total = 0.0;
    for n in 0..x.nrows() {
        let kn = kappa.row(n).transpose();
        let ktilde = (h.signal_variance - k_np.row(n).dot(&kappa.row(n))).max(0.0);
        let means: Vec<f64> = (0..c).map(|j| kn.dot(&vp.mu.row(j).transpose())).collect();
        let y = labels[n];
        let mut t = usize::MAX;
        for j in 0..c {
            if j != y && (t == usize::MAX || means[j] > means[t]) {
                t = j;
            }
        }
        let d = means[t] - means[y];
        let s_t = (kn.transpose() * &sigmas[t] * &kn)[(0, 0)];
        let s_y = (kn.transpose() * &sigmas[y] * &kn)[(0, 0)];
        let q = 2.0 * ktilde + (1.0 + d).powi(2) + s_t + s_y;
        let a = vp.alpha[n];
        let sa = a.sqrt();
        let log_b = 0.5 * (std::f64::consts::PI / (2.0 * sa)).ln() - sa;
        total += -(q - a) / (2.0 * sa) - d + 0.25 * a.ln() + log_b;
    }
    for j in 0..c {
        let s = &sigmas[j];
        let mu = vp.mu.row(j).transpose();
        let logdet = s.determinant().ln();
        total -= 0.5 * (-logdet + (&kinv * s).trace() + (mu.transpose() * &kinv * &mu)[(0, 0)]);
    }
    total
}

/// Predictive means and variances (T×C) through explicit inverses, floored at
/// the jitter like the library.
pub fn dense_predict(state: &ModelState, xt: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = state.hyper();
    let z = state.inducing().matrix();
    let (_, kinv) = dense_prior(state);
    let jitter = state.cache().unwrap().factor().jitter();
    let k_tp = gram(xt, z, &h.lengthscales, h.signal_variance);
    let a = &k_tp * &kinv;
    let vp = &state.vp;
    let c = vp.mu.nrows();
    let mut means = DMatrix::zeros(xt.nrows(), c);
    let mut vars = DMatrix::zeros(xt.nrows(), c);
    for j in 0..c {
        let s = &vp.chol_sigma[j] * vp.chol_sigma[j].transpose();
        for i in 0..xt.nrows() {
            let ai = a.row(i).transpose();
            means[(i, j)] = ai.dot(&vp.mu.row(j).transpose());
            let v = h.signal_variance - k_tp.row(i).transpose().dot(&ai) + (ai.transpose() * &s * &ai)[(0, 0)];
            vars[(i, j)] = v.max(jitter);
        }
    }
    (means, vars)
}

/// Central difference of `f` at every coordinate of `theta`.
pub fn fd_gradient(theta: &DVector<f64>, mut f: impl FnMut(&DVector<f64>) -> f64) -> DVector<f64> {
    let mut g = DVector::zeros(theta.len());
    let mut t = theta.clone();
    for i in 0..theta.len() {
        let h = 1e-6 * (1.0 + theta[i].abs());
        let orig = t[i];
        t[i] = orig + h;
        let up = f(&t);
        t[i] = orig - h;
        let down = f(&t);
        t[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// |a − b| / max(|a|, |b|, 1), maximized over entries.
pub fn max_rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Train/test pair of standardized blobs: n_train + n_test points split
/// stratified 50/50 when sizes match.
pub fn blob_split(n_total: usize, classes: usize, dims: usize, sep: f64, seed: u64) -> (Dataset, Dataset) {
    let d = mcbsvm::make_blobs(n_total, classes, dims, sep, seed).unwrap();
    mcbsvm::train_test_split(&d, 0.5, seed, true).unwrap()
}
