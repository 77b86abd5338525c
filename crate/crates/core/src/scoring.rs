//! Neuron scoring by mean-|activation| ratio, top-fraction selection, prune
//! masks, and calibration of the pruned fraction to a target accuracy drop.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Tensor};
use crate::error::{ensure, Error, Result};
use crate::geometry::{ModelGeometry, NeuronRef};
use crate::stats::ActivationStats;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const SCORES_KIND: &str = "score_map";

/// Per-neuron score `ref_mean / (epsilon + unlearn_mean)`.
///
/// Neurons specific to the unlearn dataset get the *lowest* scores under this
/// orientation; pair it with [`Direction::LowestScore`] to select them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub geometry: ModelGeometry,
    pub scores: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub ref_dataset_id: String,
    pub unlearn_dataset_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Top fraction of all neurons in the model.
    GlobalTop,
    /// The same fraction taken from every layer.
    PerLayerEqual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HighestScore,
    LowestScore,
}

impl Direction {
    /// Default for unlearning: neurons most active on the unlearn set relative to the reference.
    pub const UNLEARN: Direction = Direction::LowestScore;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSource {
    pub ref_dataset_id: String,
    pub unlearn_dataset_id: String,
}

/// A set of neurons plus the rule that produced it. Members are kept sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSelection {
    pub geometry: ModelGeometry,
    pub fraction: f64,
    pub mode: SelectionMode,
    pub direction: Direction,
    pub members: Vec<NeuronRef>,
    #[serde(default)]
    pub source: SelectionSource,
}

/// `keep[l][i] == false` forces neuron `(l, i)` to output zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub geometry: ModelGeometry,
    pub keep: Vec<Vec<bool>>,
}

/// Number of items selected from `n` at `fraction`, rounding half up.
pub fn selected_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).min(n)
}

fn check_fraction(fraction: f64) -> Result<()> {
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        Validation,
        "fraction must be in (0, 1], got {fraction}"
    );
    Ok(())
}

pub fn score_neurons(
    ref_stats: &ActivationStats,
    unlearn_stats: &ActivationStats,
    epsilon: f64,
) -> Result<ScoreMap> {
    ensure!(
        epsilon > 0.0 && epsilon.is_finite(),
        Validation,
        "epsilon must be positive and finite, got {epsilon}"
    );
    ref_stats.geometry.ensure_compatible(&unlearn_stats.geometry)?;
    for s in [ref_stats, unlearn_stats] {
        ensure!(
            s.sample_count > 0,
            InsufficientData,
            "stats for dataset '{}' have no samples",
            s.dataset_id
        );
    }
    let scores = ref_stats
        .mean_abs
        .iter()
        .zip(&unlearn_stats.mean_abs)
        .map(|(r, u)| r.iter().zip(u).map(|(&r, &u)| r / (epsilon + u)).collect())
        .collect();
    Ok(ScoreMap {
        geometry: ref_stats.geometry.clone(),
        scores,
        epsilon,
        ref_dataset_id: ref_stats.dataset_id.clone(),
        unlearn_dataset_id: unlearn_stats.dataset_id.clone(),
    })
}

impl ScoreMap {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.geometry.ensure_shape(&self.scores)?;
        ensure!(self.epsilon > 0.0, Validation, "epsilon must be positive");
        for (l, row) in self.scores.iter().enumerate() {
            if let Some(i) = row.iter().position(|s| !s.is_finite() || *s < 0.0) {
                return Err(Error::Validation(format!(
                    "score at layer {l}, neuron {i} is {}",
                    row[i]
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, r: NeuronRef) -> f64 {
        self.scores[r.layer][r.neuron]
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let flat: Vec<f64> = self.scores.iter().flatten().copied().collect();
        let mut a = Archive::new()
            .with_metadata("kind", SCORES_KIND)?
            .with_metadata("geometry", &self.geometry)?
            .with_metadata("epsilon", self.epsilon)?
            .with_metadata("ref_dataset_id", &self.ref_dataset_id)?
            .with_metadata("unlearn_dataset_id", &self.unlearn_dataset_id)?;
        a.push(Tensor::f64("scores", vec![flat.len()], flat)?);
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let geometry: ModelGeometry = a.meta("geometry")?;
        geometry.validate()?;
        let map = Self {
            scores: geometry.unflatten(&a.require("scores")?.to_f64())?,
            epsilon: a.meta("epsilon")?,
            ref_dataset_id: a.meta("ref_dataset_id")?,
            unlearn_dataset_id: a.meta("unlearn_dataset_id")?,
            geometry,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    /// Neurons ordered from most to least extreme in `direction`, ties by ascending index.
    fn ranked(&self, refs: impl Iterator<Item = NeuronRef>, direction: Direction) -> Vec<NeuronRef> {
        let mut v: Vec<NeuronRef> = refs.collect();
        v.sort_by(|a, b| {
            let (sa, sb) = (self.get(*a), self.get(*b));
            let by_score = match direction {
                Direction::HighestScore => sb.total_cmp(&sa),
                Direction::LowestScore => sa.total_cmp(&sb),
            };
            by_score.then(a.cmp(b))
        });
        v
    }

    fn counts_for(&self, fraction: f64, mode: SelectionMode) -> Vec<usize> {
        match mode {
            SelectionMode::GlobalTop => vec![selected_count(fraction, self.geometry.total_neurons())],
            SelectionMode::PerLayerEqual => self
                .geometry
                .neurons_per_layer
                .iter()
                .map(|&w| selected_count(fraction, w))
                .collect(),
        }
    }
}

pub fn select_top_fraction(
    scores: &ScoreMap,
    fraction: f64,
    mode: SelectionMode,
    direction: Direction,
) -> Result<NeuronSelection> {
    check_fraction(fraction)?;
    let g = &scores.geometry;
    let mut members = match mode {
        SelectionMode::GlobalTop => {
            let n = selected_count(fraction, g.total_neurons());
            let mut ranked = scores.ranked(g.iter(), direction);
            ranked.truncate(n);
            ranked
        }
        SelectionMode::PerLayerEqual => g
            .neurons_per_layer
            .iter()
            .enumerate()
            .flat_map(|(l, &w)| {
                let mut ranked = scores.ranked((0..w).map(|i| NeuronRef::new(l, i)), direction);
                ranked.truncate(selected_count(fraction, w));
                ranked
            })
            .collect(),
    };
    members.sort_unstable();
    Ok(NeuronSelection {
        geometry: g.clone(),
        fraction,
        mode,
        direction,
        members,
        source: SelectionSource {
            ref_dataset_id: scores.ref_dataset_id.clone(),
            unlearn_dataset_id: scores.unlearn_dataset_id.clone(),
        },
    })
}

/// Whether the selection at `f1` is contained in the selection at `f2`.
pub fn monotone_nesting_check(
    scores: &ScoreMap,
    f1: f64,
    f2: f64,
    mode: SelectionMode,
    direction: Direction,
) -> Result<bool> {
    ensure!(f1 <= f2, Validation, "nesting check needs f1 <= f2, got {f1} > {f2}");
    let small = select_top_fraction(scores, f1, mode, direction)?;
    let large = select_top_fraction(scores, f2, mode, direction)?;
    Ok(small.members.iter().all(|m| large.members.binary_search(m).is_ok()))
}

impl NeuronSelection {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, r: NeuronRef) -> bool {
        self.members.binary_search(&r).is_ok()
    }

    pub fn count_in_layer(&self, layer: usize) -> usize {
        self.members.iter().filter(|m| m.layer == layer).count()
    }

    /// Checks membership bounds, ordering, and the cardinality rule of `mode`.
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        check_fraction(self.fraction)?;
        for m in &self.members {
            ensure!(
                self.geometry.contains(*m),
                Validation,
                "member ({}, {}) is outside the geometry",
                m.layer,
                m.neuron
            );
        }
        ensure!(
            self.members.windows(2).all(|w| w[0] < w[1]),
            Validation,
            "members must be sorted ascending without duplicates"
        );
        match self.mode {
            SelectionMode::GlobalTop => {
                let want = selected_count(self.fraction, self.geometry.total_neurons());
                ensure!(
                    self.members.len() == want,
                    Validation,
                    "global selection at fraction {} must have {want} members, has {}",
                    self.fraction,
                    self.members.len()
                );
            }
            SelectionMode::PerLayerEqual => {
                for (l, &w) in self.geometry.neurons_per_layer.iter().enumerate() {
                    let want = selected_count(self.fraction, w);
                    let have = self.count_in_layer(l);
                    ensure!(
                        have == want,
                        Validation,
                        "per-layer selection at fraction {} must have {want} members in layer {l}, has {have}",
                        self.fraction
                    );
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sel: Self = serde_json::from_str(s)?;
        sel.validate()?;
        Ok(sel)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn to_mask(selection: &NeuronSelection) -> Result<PruneMask> {
    let mut mask = PruneMask::keep_all(selection.geometry.clone());
    for m in &selection.members {
        ensure!(
            selection.geometry.contains(*m),
            Validation,
            "member ({}, {}) is outside the geometry",
            m.layer,
            m.neuron
        );
        mask.keep[m.layer][m.neuron] = false;
    }
    Ok(mask)
}

impl PruneMask {
    pub fn keep_all(geometry: ModelGeometry) -> Self {
        let keep = geometry.neurons_per_layer.iter().map(|&w| vec![true; w]).collect();
        Self { geometry, keep }
    }

    /// Neurons forced to zero, in ascending order.
    pub fn pruned(&self) -> Vec<NeuronRef> {
        self.keep
            .iter()
            .enumerate()
            .flat_map(|(l, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &k)| !k)
                    .map(move |(i, _)| NeuronRef::new(l, i))
            })
            .collect()
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().flatten().filter(|&&k| !k).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub target_drop: f64,
    pub tolerance: f64,
    pub mode: SelectionMode,
    pub direction: Direction,
    pub max_fraction: f64,
}

impl CalibrationConfig {
    pub fn new(target_drop: f64, tolerance: f64) -> Self {
        Self {
            target_drop,
            tolerance,
            mode: SelectionMode::GlobalTop,
            direction: Direction::UNLEARN,
            max_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    Reached,
    Unreachable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub fraction: f64,
    pub accuracy: f64,
    pub drop: f64,
}

/// Outcome of [`calibrate_fraction`]. When `status` is `Unreachable`, the fields
/// describe the best probe seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub status: CalibrationStatus,
    pub fraction: f64,
    pub achieved_drop: f64,
    pub baseline_accuracy: f64,
    pub selection: NeuronSelection,
    pub probes: Vec<Probe>,
}

pub const PROBE_START: f64 = 0.005;

/// Finds the smallest fraction whose relative accuracy drop reaches
/// `target_drop - tolerance`.
///
/// Probes fractions `0.005, 0.01, 0.02, ...` up to `max_fraction`, then bisects the
/// first bracketing interval down to a width of one neuron (`1 / total_neurons`).
/// The evaluator maps a mask to top-1 accuracy and is called sequentially.
pub fn calibrate_fraction<E>(
    mut evaluator: E,
    scores: &ScoreMap,
    cfg: &CalibrationConfig,
) -> Result<Calibration>
where
    E: FnMut(&PruneMask) -> Result<f64>,
{
    ensure!(
        cfg.target_drop > 0.0 && cfg.target_drop < 1.0,
        Validation,
        "target drop must be in (0, 1), got {}",
        cfg.target_drop
    );
    ensure!(cfg.tolerance >= 0.0, Validation, "tolerance must be >= 0");
    check_fraction(cfg.max_fraction)?;

    let baseline = evaluator(&PruneMask::keep_all(scores.geometry.clone()))?;
    ensure!(
        baseline > 0.0,
        Degenerate,
        "baseline accuracy is {baseline}; calibration needs a positive baseline"
    );
    let threshold = cfg.target_drop - cfg.tolerance;
    let resolution = 1.0 / scores.geometry.total_neurons() as f64;

    // Fractions that round to the same per-layer counts select the same neurons.
    let mut cache: HashMap<Vec<usize>, Probe> = HashMap::new();
    let mut probes = Vec::new();
    let mut probe = |fraction: f64| -> Result<Probe> {
        let key = scores.counts_for(fraction, cfg.mode);
        let p = match cache.get(&key) {
            Some(p) => Probe { fraction, ..*p },
            None => {
                let sel = select_top_fraction(scores, fraction, cfg.mode, cfg.direction)?;
                let accuracy = evaluator(&to_mask(&sel)?)?;
                let p = Probe {
                    fraction,
                    accuracy,
                    drop: 1.0 - accuracy / baseline,
                };
                cache.insert(key, p);
                p
            }
        };
        probes.push(p);
        Ok(p)
    };

    let mut lo = 0.0;
    let mut f = PROBE_START.min(cfg.max_fraction);
    let mut best = Probe { fraction: f, accuracy: baseline, drop: f64::NEG_INFINITY };
    let mut hi = loop {
        let p = probe(f)?;
        if p.drop > best.drop {
            best = p;
        }
        if p.drop >= threshold {
            break p;
        }
        if f >= cfg.max_fraction {
            let selection = select_top_fraction(scores, best.fraction, cfg.mode, cfg.direction)?;
            return Ok(Calibration {
                status: CalibrationStatus::Unreachable,
                fraction: best.fraction,
                achieved_drop: best.drop,
                baseline_accuracy: baseline,
                selection,
                probes,
            });
        }
        lo = f;
        f = (2.0 * f).min(cfg.max_fraction);
    };

    while hi.fraction - lo > resolution {
        let mid = 0.5 * (lo + hi.fraction);
        let p = probe(mid)?;
        if p.drop >= threshold {
            hi = p;
        } else {
            lo = mid;
        }
    }

    let selection = select_top_fraction(scores, hi.fraction, cfg.mode, cfg.direction)?;
    Ok(Calibration {
        status: CalibrationStatus::Reached,
        fraction: hi.fraction,
        achieved_drop: hi.drop,
        baseline_accuracy: baseline,
        selection,
        probes,
    })
}
