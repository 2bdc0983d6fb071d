//! Finite-difference verification of the analytic objective gradients.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::kernel::{InducingInputs, KernelHyperparams};
use crate::model::{competitor_classes, ModelState, Objective, VariationalParams};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// A small random problem with a non-trivial variational state.
#[derive(Debug, Clone)]
pub struct Instance {
    pub state: ModelState,
    pub x: DMatrix<f64>,
    pub labels: Vec<usize>,
}

/// N ∈ [10, 30], C ∈ [2, 4], P ∈ [2, 6], M ∈ [1, 3]; every class occurs.
pub fn random_instance(seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(10..=30);
    let c = rng.random_range(2..=4);
    let p = rng.random_range(2..=6);
    let m = rng.random_range(1..=3);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let x = DMatrix::from_fn(n, m, |_, _| normal(&mut rng));
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);
    let z = DMatrix::from_fn(p, m, |_, _| 1.5 * normal(&mut rng));
    let hyper = KernelHyperparams::new(
        vec![rng.random_range(0.8..2.0); 1],
        rng.random_range(0.5..2.0),
        crate::kernel::DEFAULT_JITTER,
    )?;
    let state = ModelState::new(&x, hyper, InducingInputs::new(z)?, c)?;
    let mut vp = VariationalParams::init(c, p, n);
    for v in vp.mu.iter_mut() {
        *v = 0.7 * normal(&mut rng);
    }
    for l in vp.chol_sigma.iter_mut() {
        for r in 0..p {
            for k in 0..r {
                l[(r, k)] = 0.2 * normal(&mut rng);
            }
            l[(r, r)] = rng.random_range(0.4..1.2);
        }
    }
    for a in vp.alpha.iter_mut() {
        *a = rng.random_range(0.3..3.0);
    }
    let state = state.with_params(vp)?;
    Ok(Instance { state, x, labels })
}

/// Worst agreement within one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub block: &'static str,
    pub max_rel_err: f64,
    /// Human-readable coordinate of the worst entry.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub blocks: Vec<BlockReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err <= tol)
    }

    pub fn worst(&self) -> Option<&BlockReport> {
        self.blocks.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{:<10} max_rel_err {:.3e}  worst {} (analytic {:.10e}, numeric {:.10e})",
                b.block, b.max_rel_err, b.worst, b.analytic, b.numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

struct Tracker {
    report: BlockReport,
}

impl Tracker {
    fn new(block: &'static str) -> Self {
        Self {
            report: BlockReport {
                block,
                max_rel_err: 0.0,
                worst: String::from("-"),
                analytic: 0.0,
                numeric: 0.0,
            },
        }
    }

    fn see(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let e = relative_error(analytic, numeric);
        if e > self.report.max_rel_err || !e.is_finite() {
            self.report = BlockReport {
                block: self.report.block,
                max_rel_err: if e.is_finite() { e } else { f64::INFINITY },
                worst: at(),
                analytic,
                numeric,
            };
        }
    }
}

fn central<F: FnMut(f64) -> Result<f64>>(theta: f64, mut f: F) -> Result<f64> {
    let h = 1e-6 * (1.0 + theta.abs());
    Ok((f(theta + h)? - f(theta - h)?) / (2.0 * h))
}

/// Compares the analytic gradients of the objective in μ, the Cholesky
/// factors and α against central differences, with competitor classes held
/// at their values for the given state. `perturb_analytic` is added to every
/// analytic entry (fault injection).
pub fn check_gradients(inst: &Instance, perturb_analytic: f64) -> Result<GradReport> {
    let labels = &inst.labels;
    let comp = competitor_classes(&inst.state, labels)?;
    let obj = Objective::with_competitors(&inst.state, labels, comp.clone())?;
    let g_mu = obj.grad_mu()?.add_scalar(perturb_analytic);
    let g_l: Vec<DMatrix<f64>> = obj.grad_chol_sigma()?;
    let g_a: DVector<f64> = obj.grad_alpha()?.add_scalar(perturb_analytic);
    drop(obj);

    let mut scratch = inst.state.clone();
    let value = |s: &ModelState| -> Result<f64> { Objective::with_competitors(s, labels, comp.clone())?.value() };

    let (c, p) = (scratch.vp.mu.nrows(), scratch.vp.mu.ncols());
    let mut mu_t = Tracker::new("mu");
    for j in 0..c {
        for k in 0..p {
            let orig = scratch.vp.mu[(j, k)];
            let num = central(orig, |v| {
                scratch.vp.mu[(j, k)] = v;
                value(&scratch)
            })?;
            scratch.vp.mu[(j, k)] = orig;
            mu_t.see(g_mu[(j, k)], num, || format!("mu[{j},{k}]"));
        }
    }
    let mut l_t = Tracker::new("chol_sigma");
    for j in 0..c {
        for r in 0..p {
            for k in 0..=r {
                let orig = scratch.vp.chol_sigma[j][(r, k)];
                let num = central(orig, |v| {
                    scratch.vp.chol_sigma[j][(r, k)] = v;
                    value(&scratch)
                })?;
                scratch.vp.chol_sigma[j][(r, k)] = orig;
                l_t.see(g_l[j][(r, k)] + perturb_analytic, num, || format!("L_{j}[{r},{k}]"));
            }
        }
    }
    let mut a_t = Tracker::new("alpha");
    for n in 0..scratch.vp.alpha.len() {
        let orig = scratch.vp.alpha[n];
        let num = central(orig, |v| {
            scratch.vp.alpha[n] = v;
            value(&scratch)
        })?;
        scratch.vp.alpha[n] = orig;
        a_t.see(g_a[n], num, || format!("alpha[{n}]"));
    }
    Ok(GradReport {
        blocks: vec![mu_t.report, l_t.report, a_t.report],
    })
}
