use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_training_inputs, epoch_batches, hyperopt::HyperStep, record, TrainConfig, TrainTrace};
use crate::error::Result;
use crate::model::{competitor_classes, ModelState, Objective, VariationalParams};
use crate::special::ALPHA_FLOOR;

/// Plain Adam moment estimates for a flat parameter vector (ascent).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Moves `params` along `grad` (maximization).
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] += self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn softplus(r: f64) -> f64 {
    r.max(0.0) + (-r.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    // log(exp(y) - 1)
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(r: f64) -> f64 {
    1.0 / (1.0 + (-r).exp())
}

/// Flat unconstrained layout: μ (row-major), then the lower triangle of each
/// L_j row by row with the diagonal stored through softplus, then log α when
/// α is optimized by gradient.
struct Layout {
    c: usize,
    p: usize,
    n_alpha: usize,
}

impl Layout {
    fn dim(&self) -> usize {
        self.c * self.p + self.c * self.p * (self.p + 1) / 2 + self.n_alpha
    }

    fn pack(&self, vp: &VariationalParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for j in 0..self.c {
            out.extend(vp.mu.row(j).iter());
        }
        for l in &vp.chol_sigma {
            for r in 0..self.p {
                for c in 0..r {
                    out.push(l[(r, c)]);
                }
                out.push(softplus_inv(l[(r, r)]));
            }
        }
        if self.n_alpha > 0 {
            out.extend(vp.alpha.iter().map(|a| a.ln()));
        }
        out
    }

    fn unpack(&self, raw: &[f64], vp: &mut VariationalParams) {
        let mut k = 0;
        for j in 0..self.c {
            for p in 0..self.p {
                vp.mu[(j, p)] = raw[k];
                k += 1;
            }
        }
        for l in &mut vp.chol_sigma {
            for r in 0..self.p {
                for c in 0..r {
                    l[(r, c)] = raw[k];
                    k += 1;
                }
                l[(r, r)] = softplus(raw[k]).max(f64::MIN_POSITIVE);
                k += 1;
            }
        }
        if self.n_alpha > 0 {
            for a in vp.alpha.iter_mut() {
                *a = raw[k].exp().max(ALPHA_FLOOR);
                k += 1;
            }
        }
    }

    fn pack_grad(
        &self,
        raw: &[f64],
        g_mu: &DMatrix<f64>,
        g_l: &[DMatrix<f64>],
        alpha_grad: Option<(&[f64], &[f64])>,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for j in 0..self.c {
            out.extend(g_mu.row(j).iter());
        }
        let mut k = self.c * self.p;
        for g in g_l {
            for r in 0..self.p {
                for c in 0..r {
                    out.push(g[(r, c)]);
                    k += 1;
                }
                out.push(g[(r, r)] * sigmoid(raw[k]));
                k += 1;
            }
        }
        if let Some((grad, alpha)) = alpha_grad {
            // chain rule through α = exp(raw)
            out.extend(grad.iter().zip(alpha).map(|(g, a)| g * a));
        }
        out
    }
}

/// Adam on (μ, L) with α set in closed form every epoch (or by gradient when
/// `cfg.alpha_gradient`), competitor classes refreshed once per epoch.
pub fn train_adam(
    mut state: ModelState,
    x: &DMatrix<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainTrace)> {
    check_training_inputs(&state, x, labels, cfg)?;
    let layout = Layout {
        c: state.n_classes(),
        p: state.vp.n_inducing(),
        n_alpha: if cfg.alpha_gradient { state.n_data() } else { 0 },
    };
    let mut raw = layout.pack(&state.vp);
    let mut adam = Adam::new(layout.dim(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut hyper = HyperStep::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = TrainTrace::default();
    let start = Instant::now();
    let n = labels.len();

    for epoch in 1..=cfg.epochs {
        let competitors = competitor_classes(&state, labels)?;
        for (rows, scale) in epoch_batches(n, cfg.batch_size, &mut rng) {
            if !cfg.alpha_gradient {
                let alpha =
                    Objective::batch(&state, labels, competitors.clone(), rows.clone(), scale)?.alpha_closed_form();
                state.vp.alpha = alpha;
            }
            let obj = Objective::batch(&state, labels, competitors.clone(), rows, scale)?;
            let g_mu = obj.grad_mu()?;
            let g_l = obj.grad_chol_sigma()?;
            let grad = if cfg.alpha_gradient {
                let ga = obj.grad_alpha()?;
                let alpha: Vec<f64> = state.vp.alpha.iter().copied().collect();
                let ga: Vec<f64> = ga.iter().copied().collect();
                layout.pack_grad(&raw, &g_mu, &g_l, Some((&ga, &alpha)))
            } else {
                layout.pack_grad(&raw, &g_mu, &g_l, None)
            };
            drop(obj);
            adam.ascend(&mut raw, &grad);
            layout.unpack(&raw, &mut state.vp);
        }
        if cfg.hyperopt_every > 0 && epoch % cfg.hyperopt_every == 0 {
            hyper.step(&mut state, x, labels, &competitors)?;
        }
        record(&mut trace, &state, labels, epoch, start)?;
    }
    Ok((state, trace))
}
