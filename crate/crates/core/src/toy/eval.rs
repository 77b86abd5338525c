//! Top-1 evaluation, activation statistics and weight extraction for toy models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Example, Split};
use super::model::ToyTransformer;
use crate::error::{ensure, Result};
use crate::moefication::LayerWeights;
use crate::scoring::PruneMask;
use crate::stats::ActivationStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subtasks: Vec<String>,
    pub baseline: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// `1 - accuracy / baseline`.
    pub relative_drop: Vec<f64>,
}

impl EvalReport {
    pub fn new(subtasks: Vec<String>, baseline: Vec<f64>, accuracy: Vec<f64>) -> Result<Self> {
        ensure!(
            subtasks.len() == baseline.len() && baseline.len() == accuracy.len(),
            Validation,
            "report columns differ in length"
        );
        for (name, b) in subtasks.iter().zip(&baseline) {
            ensure!(*b > 0.0, Validation, "baseline accuracy for '{name}' is zero");
        }
        let relative_drop = baseline.iter().zip(&accuracy).map(|(b, a)| 1.0 - a / b).collect();
        Ok(Self { subtasks, baseline, accuracy, relative_drop })
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Correct and total predicted positions for one example.
fn score_example(model: &ToyTransformer, e: &Example, mask: Option<&PruneMask>) -> Result<(usize, usize)> {
    let out = model.forward(&e.input, mask, false)?;
    let correct = out.logits.iter().zip(&e.targets).filter(|(row, &t)| argmax(row) == t).count();
    Ok((correct, e.targets.len()))
}

/// Top-1 accuracy over all predicted positions of `examples`.
pub fn accuracy(model: &ToyTransformer, examples: &[&Example], mask: Option<&PruneMask>) -> Result<f64> {
    ensure!(!examples.is_empty(), InsufficientData, "empty split");
    let counts: Vec<(usize, usize)> = examples.par_iter().map(|e| score_example(model, e, mask)).collect::<Result<_>>()?;
    let (c, n) = counts.iter().fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
    Ok(c as f64 / n as f64)
}

/// Per-subtask accuracy; every subtask must be represented.
pub fn accuracy_by_subtask(
    model: &ToyTransformer,
    examples: &[Example],
    num_subtasks: usize,
    mask: Option<&PruneMask>,
) -> Result<Vec<f64>> {
    ensure!(!examples.is_empty(), InsufficientData, "empty split");
    let counts: Vec<(usize, usize)> = examples.par_iter().map(|e| score_example(model, e, mask)).collect::<Result<_>>()?;
    let mut correct = vec![0usize; num_subtasks];
    let mut total = vec![0usize; num_subtasks];
    for (e, (c, n)) in examples.iter().zip(counts) {
        ensure!(e.subtask < num_subtasks, Validation, "subtask id {} out of range", e.subtask);
        correct[e.subtask] += c;
        total[e.subtask] += n;
    }
    (0..num_subtasks)
        .map(|s| {
            ensure!(total[s] > 0, InsufficientData, "no examples for subtask {s}");
            Ok(correct[s] as f64 / total[s] as f64)
        })
        .collect()
}

pub fn evaluate_top1(model: &ToyTransformer, data: &Dataset, split: Split, mask: Option<&PruneMask>) -> Result<EvalReport> {
    let n = data.subtask_names.len();
    let ex = data.split(split);
    let baseline = accuracy_by_subtask(model, ex, n, None)?;
    let acc = match mask {
        Some(m) => accuracy_by_subtask(model, ex, n, Some(m))?,
        None => baseline.clone(),
    };
    EvalReport::new(data.subtask_names.clone(), baseline, acc)
}

/// Mean-absolute post-activation statistics; one sample is one sequence, whose
/// activation is the mean of `|act|` over its positions.
pub fn collect_stats(
    model: &ToyTransformer,
    examples: &[&Example],
    dataset_id: &str,
    mask: Option<&PruneMask>,
) -> Result<ActivationStats> {
    let per_sample: Vec<Vec<Vec<f64>>> = examples
        .par_iter()
        .map(|e| {
            let acts = model.forward(&e.input, mask, true)?.activations.unwrap_or_default();
            Ok(acts
                .iter()
                .map(|layer| {
                    let mut mean = vec![0.0; model.config.mlp_dim];
                    for pos in layer {
                        mean.iter_mut().zip(pos).for_each(|(m, a)| *m += a.abs());
                    }
                    mean.iter_mut().for_each(|m| *m /= layer.len() as f64);
                    mean
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut stats = ActivationStats::new(model.geometry(), dataset_id)?;
    for s in &per_sample {
        stats.accumulate(s)?;
    }
    Ok(stats)
}

/// Each layer's `W_in` with one column per neuron, as used for clustering.
pub fn mlp_input_weights(model: &ToyTransformer) -> Result<Vec<LayerWeights>> {
    let (d, m) = (model.config.model_dim, model.config.mlp_dim);
    model
        .weights
        .blocks
        .iter()
        .enumerate()
        .map(|(l, b)| LayerWeights::new(l, d, m, b.w_in.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::config::Task;
    use crate::toy::data::{gen_synthetic, SyntheticTaskSpec};
    use crate::toy::model::build_model;

    fn setup() -> (ToyTransformer, Dataset) {
        let mut spec = SyntheticTaskSpec::default_for(Task::Classification);
        spec.samples_per_subtask = 8;
        spec.eval_samples_per_subtask = 128;
        let d = gen_synthetic(&spec).unwrap();
        (build_model(spec.model_config(4)).unwrap(), d)
    }

    #[test]
    fn relative_drop_definition() {
        let r = EvalReport::new(vec!["A".into(), "B".into()], vec![0.8, 0.5], vec![0.4, 0.5]).unwrap();
        assert_eq!(r.relative_drop, vec![0.5, 0.0]);
        assert!(EvalReport::new(vec!["A".into()], vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn empty_split_is_an_error() {
        let (m, _) = setup();
        assert!(accuracy(&m, &[], None).is_err());
        assert!(accuracy_by_subtask(&m, &[], 4, None).is_err());
    }

    #[test]
    fn random_model_is_near_chance() {
        let (m, d) = setup();
        let eval = d.examples(Split::Eval, None);
        let acc = accuracy(&m, &eval, None).unwrap();
        let (n, p) = (eval.len() as f64, 1.0 / d.spec.num_outputs() as f64);
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc}, chance {p}, sigma {sigma}");
    }

    #[test]
    fn stats_count_and_masking() {
        let (m, d) = setup();
        let ex = d.examples(Split::Train, Some(0));
        let s = collect_stats(&m, &ex, "a", None).unwrap();
        assert_eq!(s.sample_count, ex.len() as u64);
        assert!(s.mean_abs.iter().flatten().all(|&v| v > 0.0));
        let mut mask = PruneMask::keep_all(m.geometry());
        mask.keep[0][5] = false;
        let s = collect_stats(&m, &ex, "a", Some(&mask)).unwrap();
        assert_eq!(s.mean_abs[0][5], 0.0);
    }

    #[test]
    fn w_in_columns_are_neurons() {
        let (m, _) = setup();
        let w = mlp_input_weights(&m).unwrap();
        assert_eq!(w.len(), 2);
        let v = w[1].neuron_vector(3);
        let d = m.config.model_dim;
        let mlp = m.config.mlp_dim;
        assert_eq!(v, (0..d).map(|i| m.weights.blocks[1].w_in[i * mlp + 3]).collect::<Vec<_>>());
    }
}
