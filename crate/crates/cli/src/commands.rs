use std::path::{Path, PathBuf};

use neuromod_core::analysis::{self, AucGrid, LorenzResult, OverlapMatrix};
use neuromod_core::archive::Archive;
use neuromod_core::moefication::{cluster_model, ClusterAssignment, LayerWeights};
use neuromod_core::report::{self, ReportEntry, ReportIndex};
use neuromod_core::scoring::{
    calibrate_fraction, score_neurons, select_top_fraction, to_mask, Calibration, CalibrationConfig, CalibrationStatus,
    NeuronSelection, ScoreMap,
};
use neuromod_core::stats::ActivationStats;
use neuromod_core::toy::{self, eval, Dataset, SyntheticTaskSpec, ToyTransformer, TrainConfig};
use neuromod_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::*;

/// What a command hands back to `main`: a JSON summary and whether calibration failed.
pub struct Outcome {
    pub summary: Value,
    pub calibration_failed: bool,
}

impl From<Value> for Outcome {
    fn from(summary: Value) -> Self {
        Self { summary, calibration_failed: false }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn labels_for(paths: &[PathBuf], given: &[String]) -> Result<Vec<String>> {
    if given.is_empty() {
        return Ok(paths
            .iter()
            .map(|p| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()))
            .collect());
    }
    if given.len() != paths.len() {
        return Err(Error::Validation(format!("{} labels for {} selections", given.len(), paths.len())));
    }
    Ok(given.to_vec())
}

pub fn stats(a: &StatsArgs) -> Result<Outcome> {
    let stats = if let Some(model_path) = &a.model {
        let dataset_path = a.dataset.as_ref().ok_or_else(|| Error::Validation("--model needs --dataset".into()))?;
        let model = ToyTransformer::read(model_path)?;
        let data = Dataset::read(dataset_path)?;
        let split = a.split.into();
        let subtask = a.subtask.as_deref().map(|s| data.subtask_index(s)).transpose()?;
        let examples = data.examples(split, subtask);
        if examples.is_empty() {
            return Err(Error::InsufficientData("selected split has no examples".into()));
        }
        toy::collect_stats(&model, &examples, &data.dataset_id(split, subtask), None)?
    } else {
        if a.merge.is_empty() {
            return Err(Error::Validation("give either --model/--dataset or --merge".into()));
        }
        let shards = a.merge.iter().map(ActivationStats::read).collect::<Result<Vec<_>>>()?;
        ActivationStats::merge_all(&shards)?
    };
    ensure_parent(&a.out)?;
    stats.write(&a.out)?;
    let manifest = stats.manifest(a.out.file_name().map(PathBuf::from).unwrap_or_else(|| a.out.clone()));
    let manifest_path = a.out.with_extension("json");
    write_json(&manifest_path, &manifest)?;
    Ok(json!({
        "out": a.out,
        "manifest": manifest_path,
        "dataset_id": stats.dataset_id,
        "sample_count": stats.sample_count,
        "num_layers": stats.geometry.num_layers,
    })
    .into())
}

pub fn score(a: &ScoreArgs) -> Result<Outcome> {
    let reference = ActivationStats::read(&a.reference)?;
    let unlearn = ActivationStats::read(&a.unlearn)?;
    let scores = score_neurons(&reference, &unlearn, a.epsilon)?;
    ensure_parent(&a.out)?;
    scores.write(&a.out)?;
    Ok(json!({
        "out": a.out,
        "ref_dataset_id": scores.ref_dataset_id,
        "unlearn_dataset_id": scores.unlearn_dataset_id,
        "epsilon": scores.epsilon,
    })
    .into())
}

pub fn select(a: &SelectArgs) -> Result<Outcome> {
    let scores = ScoreMap::read(&a.scores)?;
    let sel = select_top_fraction(&scores, a.fraction, a.mode.into(), a.direction.into())?;
    ensure_parent(&a.out)?;
    sel.write(&a.out)?;
    Ok(json!({ "out": a.out, "selected": sel.members.len(), "fraction": sel.fraction }).into())
}

pub fn calibrate(a: &CalibrateArgs) -> Result<Outcome> {
    let model = ToyTransformer::read(&a.model)?;
    let data = Dataset::read(&a.dataset)?;
    let scores = ScoreMap::read(&a.scores)?;
    let subtask = data.subtask_index(&a.subtask)?;
    let examples = data.examples(a.split.into(), Some(subtask));
    let cfg = CalibrationConfig {
        mode: a.mode.into(),
        direction: a.direction.into(),
        max_fraction: a.max_fraction,
        ..CalibrationConfig::new(a.target_drop, a.tolerance)
    };
    let cal: Calibration = calibrate_fraction(|mask| eval::accuracy(&model, &examples, Some(mask)), &scores, &cfg)?;
    write_json(&a.out, &cal)?;
    if let Some(p) = &a.selection_out {
        ensure_parent(p)?;
        cal.selection.write(p)?;
    }
    let failed = cal.status == CalibrationStatus::Unreachable;
    if failed {
        log::error!(
            "target drop {} - {} not reached; best drop {:.4} at fraction {:.4}",
            a.target_drop,
            a.tolerance,
            cal.achieved_drop,
            cal.fraction
        );
    }
    Ok(Outcome {
        summary: json!({
            "out": a.out,
            "status": cal.status,
            "fraction": cal.fraction,
            "achieved_drop": cal.achieved_drop,
            "baseline_accuracy": cal.baseline_accuracy,
            "probes": cal.probes.len(),
        }),
        calibration_failed: failed,
    })
}

/// Per-layer `W_in` from a weights archive or a toy checkpoint.
fn load_weights(path: &Path) -> Result<(neuromod_core::ModelGeometry, Vec<LayerWeights>)> {
    let a = Archive::read(path)?;
    if a.meta::<String>("kind").ok().as_deref() == Some("toy_model") {
        let model = ToyTransformer::from_archive(&a)?;
        return Ok((model.geometry(), toy::mlp_input_weights(&model)?));
    }
    LayerWeights::from_archive(&a)
}

pub fn cluster(a: &ClusterArgs) -> Result<Outcome> {
    let (geometry, weights) = load_weights(&a.weights)?;
    let k = match (a.k, a.cluster_size) {
        (Some(k), _) => k,
        (None, Some(size)) => {
            let width = geometry.neurons_per_layer[0];
            if size == 0 || geometry.neurons_per_layer.iter().any(|&w| w % size != 0) {
                return Err(Error::Validation(format!("cluster size {size} does not divide every layer width")));
            }
            width / size
        }
        (None, None) => return Err(Error::Validation("give --k or --cluster-size".into())),
    };
    let clusters = cluster_model(&geometry, &weights, k, a.seed, a.max_iters)?;
    let archive_path = a.out.with_extension("nmod");
    ensure_parent(&a.out)?;
    clusters.write(&a.out, &archive_path)?;
    Ok(json!({ "out": a.out, "archive": archive_path, "k": k, "objective": clusters.objective }).into())
}

pub fn overlap(a: &OverlapArgs) -> Result<Outcome> {
    let labels = labels_for(&a.selections, &a.labels)?;
    let sels = a.selections.iter().map(NeuronSelection::read).collect::<Result<Vec<_>>>()?;
    let m = analysis::overlap_matrix(&labels, &sels)?;
    if a.out.extension().is_some_and(|e| e == "csv") {
        write_text(&a.out, &m.to_csv())?;
    } else {
        write_json(&a.out, &m)?;
    }
    Ok(json!({ "out": a.out, "labels": m.labels, "values": m.values }).into())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LorenzFile {
    pub grid: AucGrid,
    pub mean_normalized_auc: Option<f64>,
    /// `curves[selection][layer]`.
    pub curves: Vec<Vec<Option<LorenzResult>>>,
}

pub fn lorenz(a: &LorenzArgs) -> Result<Outcome> {
    let labels = labels_for(&a.selections, &a.labels)?;
    let sels = a.selections.iter().map(NeuronSelection::read).collect::<Result<Vec<_>>>()?;
    let clusters = ClusterAssignment::read(&a.clusters)?;
    let curves = sels.iter().map(|s| analysis::lorenz_by_layer(s, &clusters)).collect::<Result<Vec<_>>>()?;
    let grid = AucGrid::from_selections(&labels, &sels, &clusters)?;
    let file = LorenzFile { mean_normalized_auc: grid.mean(), grid, curves };
    write_json(&a.out, &file)?;
    Ok(json!({ "out": a.out, "mean_normalized_auc": file.mean_normalized_auc, "values": file.grid.values }).into())
}

fn parse_related(entries: &[String]) -> Result<Vec<(usize, usize, f64)>> {
    entries
        .iter()
        .map(|e| {
            let parts: Vec<&str> = e.split(',').map(str::trim).collect();
            let bad = || Error::Validation(format!("--related expects I,J,R, got '{e}'"));
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok((
                parts[0].parse().map_err(|_| bad())?,
                parts[1].parse().map_err(|_| bad())?,
                parts[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

pub fn toy_train(a: &ToyTrainArgs) -> Result<Outcome> {
    let task = a.task.into();
    let mut spec = if a.related.is_empty() && a.subtasks == 4 {
        SyntheticTaskSpec::default_for(task)
    } else {
        SyntheticTaskSpec::with_pairs(task, a.subtasks, &parse_related(&a.related)?)
    };
    spec.samples_per_subtask = a.samples_per_subtask;
    spec.eval_samples_per_subtask = a.eval_samples_per_subtask;
    spec.seed = a.data_seed;
    let data = toy::gen_synthetic(&spec)?;
    let mut cfg = spec.model_config(a.seed);
    cfg.num_layers = a.layers;
    cfg.model_dim = a.model_dim;
    cfg.mlp_dim = a.mlp_dim;
    cfg.num_heads = a.heads;
    let mut model = toy::build_model(cfg)?;
    let tc = TrainConfig { steps: a.steps, learning_rate: a.lr, batch_size: a.batch_size, seed: a.train_seed, ..Default::default() };
    let report = toy::train(&mut model, &data.train, &tc)?;
    let train_accuracy = eval::accuracy(&model, &data.examples(toy::Split::Train, None), None)?;

    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    model.write(a.out_dir.join("model.nmod"))?;
    data.write(a.out_dir.join("dataset.nmod"))?;
    write_json(&a.out_dir.join("dataset.json"), &data.manifest("dataset.nmod"))?;
    let summary = json!({
        "out": a.out_dir,
        "model": a.out_dir.join("model.nmod"),
        "dataset": a.out_dir.join("dataset.nmod"),
        "config": model.config,
        "train": tc,
        "train_accuracy": train_accuracy,
        "final_loss": report.loss_trace.last(),
    });
    write_json(
        &a.out_dir.join("train.json"),
        &json!({ "train_accuracy": train_accuracy, "loss_trace": report.loss_trace, "config": model.config, "train": tc }),
    )?;
    Ok(summary.into())
}

pub fn toy_eval(a: &ToyEvalArgs) -> Result<Outcome> {
    let model = ToyTransformer::read(&a.model)?;
    let data = Dataset::read(&a.dataset)?;
    let mask = a.selection.as_ref().map(|p| NeuronSelection::read(p).and_then(|s| to_mask(&s))).transpose()?;
    let report = toy::evaluate_top1(&model, &data, a.split.into(), mask.as_ref())?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(serde_json::to_value(&report)?.into())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "figure".into(), |s| s.to_string_lossy().into_owned())
}

fn read_overlap(p: &Path) -> Result<OverlapMatrix> {
    let m: OverlapMatrix = read_json(p)?;
    m.validate()?;
    Ok(m)
}

pub fn report(a: &ReportArgs) -> Result<Outcome> {
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut index = ReportIndex::default();
    let mut emit = |kind: &str, source: &Path, name: String, svg: String| -> Result<()> {
        write_text(&a.out_dir.join(&name), &svg)?;
        index.figures.push(ReportEntry { kind: kind.into(), source: source.display().to_string(), path: name });
        Ok(())
    };
    for p in &a.overlaps {
        let m = read_overlap(p)?;
        let name = stem(p);
        emit("overlap_heatmap", p, format!("{name}.heatmap.svg"), report::overlap_heatmap_svg(&m, &format!("Selection overlap: {name}")))?;
    }
    for p in &a.aucs {
        let f: LorenzFile = read_json(p)?;
        f.grid.validate()?;
        let name = stem(p);
        emit("auc_lines", p, format!("{name}.auc.svg"), report::auc_lines_svg(&f.grid, &format!("Normalized AUC by layer: {name}")))?;
    }
    if let (Some(t), Some(r)) = (&a.trained_overlap, &a.random_overlap) {
        let diffs = analysis::sorted_overlap_diff(&read_overlap(t)?, &read_overlap(r)?)?;
        emit("overlap_diff", t, "overlap_diff.svg".into(), report::overlap_diff_svg(&diffs, "Sorted overlaps, trained vs random"))?;
        write_json(&a.out_dir.join("overlap_diff.json"), &diffs)?;
    }
    if index.figures.is_empty() {
        return Err(Error::Validation("nothing to report; give --overlap, --auc or a trained/random overlap pair".into()));
    }
    let index_path = a.out_dir.join("index.json");
    write_json(&index_path, &index)?;
    Ok(json!({ "out": index_path, "figures": index.figures }).into())
}

