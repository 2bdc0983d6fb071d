//! Sparse variational multi-class Bayesian support vector machine.
//!
//! A Gaussian-process decision function per class, summarized by inducing
//! points, is fitted under a multi-class hinge pseudo-likelihood by
//! maximizing a variational lower bound. Training uses either Adam on the
//! Euclidean gradients or coordinate ascent on natural parameters.
//! Predictions come with a variation-ratio uncertainty score, which also
//! drives the active-learning simulator.

pub mod active;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernel;
pub mod model;
pub mod optim;
pub mod predict;
pub mod rank;
pub mod special;

pub use active::{run_active_learning, ALConfig, ActiveLearningTrace, Policy};
pub use data::{load_csv, make_blobs, train_test_split, Dataset};
pub use error::{Error, Result};
pub use kernel::{InducingInputs, KernelCache, KernelHyperparams};
pub use model::{ModelState, Objective, VariationalParams};
pub use optim::{train, Method, TrainConfig, TrainTrace};
pub use predict::{decide, predict_dist, variation_ratio, PredictiveDistribution, Predictor};
pub use rank::{mean_ranks, AccuracyTable};

/// Float formatting used in every output file: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
