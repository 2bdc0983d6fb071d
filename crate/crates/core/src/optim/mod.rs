//! Training loops over the variational parameters: Adam on Euclidean
//! gradients and coordinate ascent on natural parameters.

mod adam;
mod coord;
mod hyperopt;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{elbo, ModelState};

pub use adam::{train_adam, Adam};
pub use coord::{target_natural_params, train_coord_ascent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Adam,
    CoordAscent,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adam" => Ok(Method::Adam),
            "coord_ascent" => Ok(Method::CoordAscent),
            other => Err(format!("unknown method '{other}' (expected adam or coord_ascent)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Coordinate-ascent interpolation step ρ ∈ (0, 1].
    pub rho: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Refine kernel hyperparameters and inducing inputs every this many
    /// epochs; 0 keeps them frozen.
    pub hyperopt_every: usize,
    /// Minibatch size; `None` is full batch.
    pub batch_size: Option<usize>,
    /// Under Adam, update α by its gradient instead of the closed form.
    pub alpha_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            epochs: 1000,
            learning_rate: 5e-4,
            rho: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            hyperopt_every: 0,
            batch_size: None,
            alpha_gradient: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam epsilon must be > 0".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub elbo: f64,
    /// Wall-clock seconds since training started.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn elbos(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.elbo).collect()
    }

    pub fn last_elbo(&self) -> Option<f64> {
        self.rows.last().map(|r| r.elbo)
    }

    /// `epoch,elbo,seconds` with a header row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,elbo,seconds")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.epoch, crate::fmt_f64(r.elbo), crate::fmt_f64(r.seconds))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }
}

/// Dispatches on `cfg.method`.
pub fn train(
    state: ModelState,
    x: &DMatrix<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainTrace)> {
    match cfg.method {
        Method::Adam => train_adam(state, x, labels, cfg),
        Method::CoordAscent => train_coord_ascent(state, x, labels, cfg),
    }
}

fn record(
    trace: &mut TrainTrace,
    state: &ModelState,
    labels: &[usize],
    epoch: usize,
    start: Instant,
) -> Result<()> {
    let value = match elbo(state, labels) {
        Ok(v) if v.is_finite() => v,
        Ok(v) => return Err(abort(state, epoch, v)),
        Err(Error::Numerical(_)) => return Err(abort(state, epoch, f64::NAN)),
        Err(e) => return Err(e),
    };
    trace.rows.push(TraceRow {
        epoch,
        elbo: value,
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(())
}

fn abort(state: &ModelState, epoch: usize, value: f64) -> Error {
    Error::NonFiniteObjective {
        epoch,
        value,
        snapshot: Box::new(state.vp.clone()),
    }
}

fn check_training_inputs(state: &ModelState, x: &DMatrix<f64>, labels: &[usize], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if x.nrows() != labels.len() || labels.len() != state.n_data() {
        return Err(Error::Input(format!(
            "{} rows, {} labels, state built for {} points",
            x.nrows(),
            labels.len(),
            state.n_data()
        )));
    }
    state.cache()?;
    Ok(())
}

/// Row batches for one epoch; full batch yields a single batch with scale 1.
fn epoch_batches(n: usize, batch_size: Option<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<(Vec<usize>, f64)> {
    use rand::seq::SliceRandom;
    match batch_size {
        Some(b) if b < n => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            order
                .chunks(b)
                .map(|c| {
                    let mut rows = c.to_vec();
                    rows.sort_unstable();
                    let scale = n as f64 / rows.len() as f64;
                    (rows, scale)
                })
                .collect()
        }
        _ => vec![((0..n).collect(), 1.0)],
    }
}
