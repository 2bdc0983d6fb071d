//! Type-II refinement of kernel hyperparameters and inducing inputs by
//! central finite differences of the objective.

use nalgebra::DMatrix;

use super::{Adam, TrainConfig};
use crate::error::Result;
use crate::kernel::{InducingInputs, KernelHyperparams};
use crate::model::{ModelState, Objective};

const FD_STEP: f64 = 1e-4;

pub(super) struct HyperStep {
    adam: Option<Adam>,
    lr: f64,
    betas: (f64, f64, f64),
}

impl HyperStep {
    pub(super) fn new(cfg: &TrainConfig) -> Self {
        Self {
            adam: None,
            lr: cfg.learning_rate,
            betas: (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        }
    }

    /// One Adam ascent step on (log ℓ, log σ², Z).
    pub(super) fn step(
        &mut self,
        state: &mut ModelState,
        x: &DMatrix<f64>,
        labels: &[usize],
        competitors: &[usize],
    ) -> Result<()> {
        let mut theta = pack(state);
        let base_hyper = state.hyper().clone();
        let base_z = state.inducing().clone();
        let eval = |theta: &[f64], scratch: &mut ModelState| -> Option<f64> {
            let (h, z) = unpack(theta, &base_hyper, &base_z)?;
            scratch.set_hyper(h).ok()?;
            scratch.set_inducing(z).ok()?;
            scratch.rebuild_cache(x).ok()?;
            Objective::with_competitors(scratch, labels, competitors.to_vec())
                .ok()?
                .value()
                .ok()
        };
        let mut scratch = state.clone();
        let mut grad = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let h = FD_STEP * theta[i].abs().max(1.0);
            let orig = theta[i];
            theta[i] = orig + h;
            let up = eval(&theta, &mut scratch);
            theta[i] = orig - h;
            let down = eval(&theta, &mut scratch);
            theta[i] = orig;
            match (up, down) {
                (Some(u), Some(d)) if u.is_finite() && d.is_finite() => grad[i] = (u - d) / (2.0 * h),
                _ => {
                    log::warn!("hyperparameter refinement skipped: objective undefined near coordinate {i}");
                    return Ok(());
                }
            }
        }
        let (b1, b2, eps) = self.betas;
        let adam = self
            .adam
            .get_or_insert_with(|| Adam::new(theta.len(), self.lr, b1, b2, eps));
        let mut next = theta.clone();
        adam.ascend(&mut next, &grad);
        let Some((h, z)) = unpack(&next, &base_hyper, &base_z) else {
            return Ok(());
        };
        let mut candidate = state.clone();
        candidate.set_hyper(h)?;
        candidate.set_inducing(z)?;
        match candidate.rebuild_cache(x) {
            Ok(()) => *state = candidate,
            Err(e) => log::warn!("hyperparameter refinement rejected: {e}"),
        }
        Ok(())
    }
}

fn pack(state: &ModelState) -> Vec<f64> {
    let h = state.hyper();
    let mut out: Vec<f64> = h.lengthscales.iter().map(|l| l.ln()).collect();
    out.push(h.signal_variance.ln());
    let z = state.inducing().matrix();
    for i in 0..z.nrows() {
        out.extend(z.row(i).iter());
    }
    out
}

fn unpack(theta: &[f64], base: &KernelHyperparams, z0: &InducingInputs) -> Option<(KernelHyperparams, InducingInputs)> {
    let nl = base.lengthscales.len();
    let ls: Vec<f64> = theta[..nl].iter().map(|v| v.exp()).collect();
    let sv = theta[nl].exp();
    let h = KernelHyperparams::new(ls, sv, base.jitter).ok()?;
    let (p, m) = (z0.len(), z0.dims());
    let z = DMatrix::from_row_slice(p, m, &theta[nl + 1..]);
    Some((h, InducingInputs::new(z).ok()?))
}
