use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_training_inputs, epoch_batches, hyperopt::HyperStep, record, TrainConfig, TrainTrace};
use crate::error::{Error, Result};
use crate::model::{competitor_classes, from_natural, symmetrize, to_natural, ModelState, Objective};

const MAX_RHO_HALVINGS: usize = 10;

/// Natural parameters (η̂₁, η̂₂) of class `j` at which both natural
/// gradients vanish, with α, the competitor classes and the means of all
/// other classes held fixed.
///
/// ```text
/// η̂₂ = −½ K_PP⁻¹ − s Σ_{n: j ∈ {t_n, y_n}} κ_nᵀκ_n / (2√α_n)
/// η̂₁ = s Σ_{n: y_n = j} κ_nᵀ ((1 + κ_n μ_{t_n}) / √α_n + 1)
///    − s Σ_{n: t_n = j} κ_nᵀ ((1 − κ_n μ_{y_n}) / √α_n + 1)
/// ```
///
/// where the sums run over `rows` and `s = scale`.
pub fn target_natural_params(
    state: &ModelState,
    labels: &[usize],
    competitors: &[usize],
    rows: &[usize],
    scale: f64,
    j: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cache = state.cache()?;
    let vp = &state.vp;
    let p = vp.n_inducing();
    let mut eta2 = cache.factor().inverse() * -0.5;
    let mut eta1 = DVector::zeros(p);
    for &n in rows {
        let (t, y) = (competitors[n], labels[n]);
        if j != t && j != y {
            continue;
        }
        let k = cache.kappa().row(n).transpose();
        let w = 1.0 / vp.alpha[n].sqrt();
        eta2 -= (&k * k.transpose()) * (0.5 * scale * w);
        if j == y {
            let f_t = k.dot(&vp.mean(t));
            eta1 += &k * (scale * (w * (1.0 + f_t) + 1.0));
        } else {
            let f_y = k.dot(&vp.mean(y));
            eta1 -= &k * (scale * (w * (1.0 - f_y) + 1.0));
        }
    }
    Ok((eta1, symmetrize(&eta2)))
}

/// Coordinate ascent: α in closed form, then for each class an interpolated
/// step toward the stationary natural parameters, classes updated in turn.
pub fn train_coord_ascent(
    mut state: ModelState,
    x: &DMatrix<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainTrace)> {
    check_training_inputs(&state, x, labels, cfg)?;
    let mut hyper = HyperStep::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = TrainTrace::default();
    let start = Instant::now();
    let n = labels.len();
    let c = state.n_classes();

    for epoch in 1..=cfg.epochs {
        let competitors = competitor_classes(&state, labels)?;
        for (rows, scale) in epoch_batches(n, cfg.batch_size, &mut rng) {
            let alpha = Objective::batch(&state, labels, competitors.clone(), rows.clone(), scale)?.alpha_closed_form();
            state.vp.alpha = alpha;
            for j in 0..c {
                let (t1, t2) = target_natural_params(&state, labels, &competitors, &rows, scale, j)?;
                let (e1, e2) = to_natural(&state.vp.chol_sigma[j], &state.vp.mean(j))?;
                let mut rho = cfg.rho;
                let mut accepted = None;
                for _ in 0..=MAX_RHO_HALVINGS {
                    let n1 = &e1 * (1.0 - rho) + &t1 * rho;
                    let n2 = &e2 * (1.0 - rho) + &t2 * rho;
                    if let Some(sol) = from_natural(&n1, &n2) {
                        accepted = Some(sol);
                        break;
                    }
                    log::debug!("epoch {epoch}, class {j}: −2η₂ not positive definite at ρ = {rho}");
                    rho *= 0.5;
                }
                let (l, mu) = accepted.ok_or_else(|| {
                    Error::Numerical(format!(
                        "epoch {epoch}, class {j}: natural parameters lost positive definiteness after {MAX_RHO_HALVINGS} step halvings"
                    ))
                })?;
                state.vp.chol_sigma[j] = l;
                state.vp.mu.set_row(j, &mu.transpose());
            }
        }
        if cfg.hyperopt_every > 0 && epoch % cfg.hyperopt_every == 0 {
            hyper.step(&mut state, x, labels, &competitors)?;
        }
        record(&mut trace, &state, labels, epoch, start)?;
    }
    Ok((state, trace))
}
