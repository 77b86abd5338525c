//! Plain minibatch SGD with seed-ordered batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Example;
use super::model::{example_loss, ToyTransformer, Weights};
use crate::error::{ensure, Error, Result};

/// Training stops with an error once the loss exceeds this multiple of the first step's loss.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// The step size decays linearly from `learning_rate` to this fraction of it.
    #[serde(default = "default_final_lr_fraction")]
    pub final_lr_fraction: f64,
}

fn default_final_lr_fraction() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, learning_rate: 0.2, batch_size: 16, seed: 0, final_lr_fraction: default_final_lr_fraction() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss before each update.
    pub loss_trace: Vec<f64>,
}

/// Mean loss over `examples` and its gradient.
pub fn loss_and_gradient(model: &ToyTransformer, examples: &[&Example]) -> Result<(f64, Weights)> {
    ensure!(!examples.is_empty(), InsufficientData, "empty batch");
    let mut grads = model.weights.zeros_like();
    let w = 1.0 / examples.len() as f64;
    let mut loss = 0.0;
    for e in examples {
        loss += w * example_loss(model, &e.input, &e.targets, w, Some(&mut grads))?.0;
    }
    Ok((loss, grads))
}

pub fn loss(model: &ToyTransformer, examples: &[&Example]) -> Result<f64> {
    ensure!(!examples.is_empty(), InsufficientData, "empty batch");
    let mut total = 0.0;
    for e in examples {
        total += example_loss(model, &e.input, &e.targets, 1.0, None)?.0;
    }
    Ok(total / examples.len() as f64)
}

pub fn train(model: &mut ToyTransformer, examples: &[Example], cfg: &TrainConfig) -> Result<TrainReport> {
    ensure!(
        cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0,
        Validation,
        "learning rate must be positive"
    );
    ensure!(cfg.batch_size >= 1, Validation, "batch size must be positive");
    ensure!(
        (0.0..=1.0).contains(&cfg.final_lr_fraction),
        Validation,
        "final learning-rate fraction must be in [0, 1]"
    );
    if cfg.steps == 0 {
        return Ok(TrainReport { loss_trace: vec![] });
    }
    ensure!(!examples.is_empty(), InsufficientData, "no training examples");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let (l, g) = loss_and_gradient(model, &batch)?;
        if !l.is_finite() || trace.first().is_some_and(|&first: &f64| l > DIVERGENCE_FACTOR * first) {
            return Err(Error::Training(format!("loss diverged to {l} at step {step}")));
        }
        trace.push(l);
        let progress = step as f64 / cfg.steps as f64;
        let lr = cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
        model.weights.add_scaled(&g, -lr);
    }
    Ok(TrainReport { loss_trace: trace })
}

/// Means over consecutive non-overlapping windows.
pub fn smoothed(trace: &[f64], window: usize) -> Vec<f64> {
    trace.chunks(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}
