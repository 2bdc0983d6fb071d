//! Simulated pool-based active learning.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::optim::{train_adam, TrainConfig};
use crate::predict::{decide, mean_softmax, predict_dist, variation_ratio, PredictiveDistribution, DEFAULT_VR_SAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    VariationRatio,
    MeanEntropy,
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "variation_ratio" => Ok(Policy::VariationRatio),
            "mean_entropy" => Ok(Policy::MeanEntropy),
            other => Err(format!("unknown policy '{other}' (expected variation_ratio or mean_entropy)")),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Policy::VariationRatio => "variation_ratio",
            Policy::MeanEntropy => "mean_entropy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALConfig {
    pub policy: Policy,
    pub budget: usize,
    pub inducing_points: usize,
    pub retrain_epochs: usize,
    pub seeds: Vec<u64>,
    pub vr_samples: usize,
    pub learning_rate: f64,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            policy: Policy::VariationRatio,
            budget: 100,
            inducing_points: 4,
            retrain_epochs: 200,
            seeds: vec![0],
            vr_samples: DEFAULT_VR_SAMPLES,
            learning_rate: 5e-4,
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inducing_points == 0 {
            return Err(Error::Config("active learning needs at least one inducing point".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("active learning needs at least one seed".into()));
        }
        if self.vr_samples == 0 {
            return Err(Error::Config("vr_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of a trace; step 0 is the initial labeled set and has no query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALStep {
    pub step: usize,
    pub query_index: Option<usize>,
    pub policy_score: Option<f64>,
    pub n_labeled: usize,
    pub test_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveLearningTrace {
    pub seed: u64,
    pub policy: Policy,
    pub steps: Vec<ALStep>,
}

impl ActiveLearningTrace {
    pub fn final_error(&self) -> f64 {
        self.steps.last().map(|s| s.test_error).unwrap_or(f64::NAN)
    }

    pub fn initial_error(&self) -> f64 {
        self.steps.first().map(|s| s.test_error).unwrap_or(f64::NAN)
    }

    /// Pool indices in query order.
    pub fn queried(&self) -> Vec<usize> {
        self.steps.iter().filter_map(|s| s.query_index).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "query_index", "policy_score", "n_labeled", "test_error"])?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.query_index.map(|q| q.to_string()).unwrap_or_default(),
                s.policy_score.map(crate::fmt_f64).unwrap_or_default(),
                s.n_labeled.to_string(),
                crate::fmt_f64(s.test_error),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-step mean and standard error of the test error across traces.
pub fn write_aggregate_csv(traces: &[ActiveLearningTrace], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "n_labeled", "mean_test_error", "stderr_test_error", "n_seeds"])?;
    let steps = traces.iter().map(|t| t.steps.len()).min().unwrap_or(0);
    for k in 0..steps {
        let errs: Vec<f64> = traces.iter().map(|t| t.steps[k].test_error).collect();
        let (mean, se) = mean_stderr(&errs);
        w.write_record([
            k.to_string(),
            traces[0].steps[k].n_labeled.to_string(),
            crate::fmt_f64(mean),
            crate::fmt_f64(se),
            errs.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Sample mean and standard error (0 for a single value).
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Shannon entropy (natural log) of each row of a row-stochastic matrix.
pub fn row_entropy(p: &DMatrix<f64>) -> Vec<f64> {
    p.row_iter()
        .map(|row| -row.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>())
        .collect()
}

pub fn policy_score(dist: &PredictiveDistribution, policy: Policy, vr_samples: usize, seed: u64) -> Result<Vec<f64>> {
    match policy {
        Policy::VariationRatio => variation_ratio(dist, vr_samples, seed),
        Policy::MeanEntropy => Ok(row_entropy(&mean_softmax(dist))),
    }
}

fn test_error(state: &ModelState, test: &Dataset) -> Result<f64> {
    let pred = decide(&predict_dist(state, &test.features)?);
    let wrong = pred.iter().zip(&test.labels).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / test.n_rows() as f64)
}

fn retrain(pool: &Dataset, labeled: &[usize], cfg: &ALConfig, seed: u64) -> Result<ModelState> {
    let x = DMatrix::from_fn(labeled.len(), pool.n_features(), |i, j| pool.features[(labeled[i], j)]);
    let y: Vec<usize> = labeled.iter().map(|&i| pool.labels[i]).collect();
    let state = ModelState::initialize(&x, pool.class_count(), cfg.inducing_points, false, seed)?;
    let tc = TrainConfig {
        epochs: cfg.retrain_epochs,
        learning_rate: cfg.learning_rate,
        seed,
        ..TrainConfig::default()
    };
    Ok(train_adam(state, &x, &y, &tc)?.0)
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64)
}

/// One instance per class drawn uniformly with `seed`, independent of the
/// policy.
pub fn initial_labeled_set(pool: &Dataset, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); pool.class_count()];
    for (i, &y) in pool.labels.iter().enumerate() {
        members[y].push(i);
    }
    members
        .iter()
        .enumerate()
        .map(|(k, m)| {
            m.choose(&mut rng).copied().ok_or_else(|| {
                Error::Config(format!("class '{}' has no instance in the pool", pool.label_names[k]))
            })
        })
        .collect()
}

fn check_inputs(pool: &Dataset, test: &Dataset, cfg: &ALConfig) -> Result<()> {
    cfg.validate()?;
    if pool.label_names != test.label_names {
        return Err(Error::Config("pool and test sets use different label sets".into()));
    }
    if pool.n_features() != test.n_features() {
        return Err(Error::Config("pool and test sets have different feature counts".into()));
    }
    if test.n_rows() == 0 {
        return Err(Error::Config("test set is empty".into()));
    }
    if let Some(k) = pool.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::Config(format!("class '{}' has no instance in the pool", pool.label_names[k])));
    }
    Ok(())
}

fn run_one(pool: &Dataset, test: &Dataset, cfg: &ALConfig, seed: u64) -> Result<ActiveLearningTrace> {
    let mut labeled = initial_labeled_set(pool, seed)?;
    let mut is_labeled = vec![false; pool.n_rows()];
    for &i in &labeled {
        is_labeled[i] = true;
    }
    let mut state = retrain(pool, &labeled, cfg, step_seed(seed, 0))?;
    let mut steps = vec![ALStep {
        step: 0,
        query_index: None,
        policy_score: None,
        n_labeled: labeled.len(),
        test_error: test_error(&state, test)?,
    }];
    for step in 1..=cfg.budget {
        let candidates: Vec<usize> = (0..pool.n_rows()).filter(|&i| !is_labeled[i]).collect();
        if candidates.is_empty() {
            log::warn!("seed {seed}: pool exhausted after {} queries", step - 1);
            break;
        }
        let xc = DMatrix::from_fn(candidates.len(), pool.n_features(), |i, j| pool.features[(candidates[i], j)]);
        let dist = predict_dist(&state, &xc)?;
        let scores = policy_score(&dist, cfg.policy, cfg.vr_samples, step_seed(seed, step))?;
        let mut best = 0;
        for (k, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = k;
            }
        }
        let q = candidates[best];
        labeled.push(q);
        is_labeled[q] = true;
        state = retrain(pool, &labeled, cfg, step_seed(seed, step))?;
        steps.push(ALStep {
            step,
            query_index: Some(q),
            policy_score: Some(scores[best]),
            n_labeled: labeled.len(),
            test_error: test_error(&state, test)?,
        });
    }
    Ok(ActiveLearningTrace {
        seed,
        policy: cfg.policy,
        steps,
    })
}

/// Runs every seed (in parallel) and returns the traces in seed order.
pub fn run_active_learning(pool: &Dataset, test: &Dataset, cfg: &ALConfig) -> Result<Vec<ActiveLearningTrace>> {
    check_inputs(pool, test, cfg)?;
    cfg.seeds.par_iter().map(|&s| run_one(pool, test, cfg, s)).collect()
}
