//! Synthetic multi-subtask datasets with controllable feature sharing.
//!
//! Every subtask owns `features_per_subtask` generative features drawn from a
//! shared pool. A subtask takes `round(r * F)` of its features from each earlier
//! subtask it is related to (strongest relation first), so relatedness 0 means
//! disjoint feature sets and relatedness 1 means identical ones. Classification
//! samples carry their subtask's features with random signs in every patch; the
//! class is a parity of those signs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::config::{Task, ToyConfig};
use super::model::Input;
use crate::archive::{Archive, Tensor};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub num_subtasks: usize,
    pub relatedness: Vec<Vec<f64>>,
    pub samples_per_subtask: usize,
    pub eval_samples_per_subtask: usize,
    pub seed: u64,
    pub task: Task,
    pub features_per_subtask: usize,
    /// Classes per subtask (classification only).
    pub classes_per_subtask: usize,
    /// Patch width (classification only).
    pub input_dim: usize,
    /// Patches per input, or tokens fed to the model per sequence.
    pub seq_len: usize,
    /// Gaussian patch noise, or the probability of a random next token.
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub subtask: usize,
    pub input: Input,
    /// One class label, or the next token at every input position.
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub subtask_names: Vec<String>,
    /// Feature-pool ids used by each subtask.
    pub features: Vec<Vec<usize>>,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SyntheticTaskSpec,
    pub subtask_names: Vec<String>,
    pub features: Vec<Vec<usize>>,
    pub train_count: usize,
    pub eval_count: usize,
    pub archive_path: String,
}

pub fn subtask_name(i: usize) -> String {
    if i < 26 {
        char::from(b'A' + i as u8).to_string()
    } else {
        format!("S{i}")
    }
}

impl SyntheticTaskSpec {
    /// Four classification subtasks; A-B and C-D are related, A-C and B-D are not.
    pub fn default_for(task: Task) -> Self {
        let relatedness = vec![
            vec![1.0, 0.5, 0.0, 0.25],
            vec![0.5, 1.0, 0.25, 0.0],
            vec![0.0, 0.25, 1.0, 0.5],
            vec![0.25, 0.0, 0.5, 1.0],
        ];
        let (seq_len, noise) = match task {
            Task::Classification => (4, 0.5),
            Task::NextToken => (8, 0.1),
        };
        Self {
            num_subtasks: 4,
            relatedness,
            samples_per_subtask: 512,
            eval_samples_per_subtask: 512,
            seed: 0,
            task,
            features_per_subtask: 4,
            classes_per_subtask: 2,
            input_dim: 16,
            seq_len,
            noise,
        }
    }

    /// `n` subtasks with zero relatedness except the listed symmetric pairs.
    pub fn with_pairs(task: Task, n: usize, pairs: &[(usize, usize, f64)]) -> Self {
        let mut s = Self::default_for(task);
        s.num_subtasks = n;
        s.relatedness = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        for &(i, j, r) in pairs {
            if i < n && j < n {
                s.relatedness[i][j] = r;
                s.relatedness[j][i] = r;
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_subtasks;
        ensure!(n >= 1, Validation, "need at least one subtask");
        ensure!(
            self.relatedness.len() == n && self.relatedness.iter().all(|r| r.len() == n),
            Validation,
            "relatedness must be {n}x{n}"
        );
        for i in 0..n {
            ensure!(self.relatedness[i][i] == 1.0, Validation, "relatedness[{i}][{i}] must be 1");
            for j in 0..n {
                let r = self.relatedness[i][j];
                ensure!((0.0..=1.0).contains(&r), Validation, "relatedness[{i}][{j}] = {r} outside [0, 1]");
                ensure!(r == self.relatedness[j][i], Validation, "relatedness not symmetric at ({i}, {j})");
            }
        }
        ensure!(self.features_per_subtask >= 1, Validation, "features_per_subtask must be positive");
        ensure!(self.samples_per_subtask >= 1, Validation, "samples_per_subtask must be positive");
        ensure!(self.seq_len >= 1, Validation, "seq_len must be positive");
        ensure!(self.noise.is_finite() && self.noise >= 0.0, Validation, "noise must be finite and non-negative");
        if self.task == Task::Classification {
            ensure!(self.classes_per_subtask >= 2, Validation, "need at least 2 classes per subtask");
            ensure!(self.input_dim >= 1, Validation, "input_dim must be positive");
            let f = self.features_per_subtask;
            ensure!(
                f * (f + 1) / 2 + 1 >= self.classes_per_subtask,
                Validation,
                "{f} features cannot realize {} classes",
                self.classes_per_subtask
            );
        } else {
            ensure!(self.noise <= 1.0, Validation, "next-token noise is a probability");
        }
        Ok(())
    }

    /// Classes (classification) or vocabulary size (next-token).
    pub fn num_outputs(&self) -> usize {
        match self.task {
            Task::Classification => self.num_subtasks * self.classes_per_subtask,
            Task::NextToken => self.num_subtasks * self.features_per_subtask,
        }
    }

    /// The default model configuration sized for this dataset.
    pub fn model_config(&self, seed: u64) -> ToyConfig {
        let mut c = ToyConfig::default_for(self.task);
        c.num_classes = self.num_outputs();
        c.max_seq_len = self.seq_len;
        c.input_dim = if self.task == Task::Classification { self.input_dim } else { 0 };
        c.seed = seed;
        c
    }

    /// Feature ids per subtask.
    pub fn allocate_features(&self) -> Vec<Vec<usize>> {
        let f = self.features_per_subtask;
        let mut next = 0usize;
        let mut out: Vec<Vec<usize>> = Vec::with_capacity(self.num_subtasks);
        for j in 0..self.num_subtasks {
            let mut earlier: Vec<usize> = (0..j).collect();
            earlier.sort_by(|&a, &b| self.relatedness[j][b].total_cmp(&self.relatedness[j][a]).then(a.cmp(&b)));
            let mut mine: Vec<usize> = Vec::with_capacity(f);
            for i in earlier {
                let want = (self.relatedness[j][i] * f as f64).round() as usize;
                let mut taken = 0;
                for &feat in &out[i] {
                    if taken == want || mine.len() == f {
                        break;
                    }
                    if !mine.contains(&feat) {
                        mine.push(feat);
                        taken += 1;
                    }
                }
            }
            while mine.len() < f {
                mine.push(next);
                next += 1;
            }
            out.push(mine);
        }
        out
    }
}

/// Class of a sign pattern within its subtask: `sum((s + 1) * [sign_s > 0]) mod classes`.
/// With two classes this is the parity of the even-indexed features, which no
/// linear readout of the features can compute.
pub fn class_of(positive: &[bool], classes: usize) -> usize {
    positive.iter().enumerate().filter(|(_, &p)| p).map(|(s, _)| s + 1).sum::<usize>() % classes
}

/// `count` unit vectors in `dim` dimensions, orthonormal when `count <= dim`.
fn feature_directions(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    for k in 0..count {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            if k < dim {
                for u in &dirs {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|a| *a /= norm);
                dirs.push(v);
                break;
            }
        }
    }
    dirs
}

pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let features = spec.allocate_features();
    let pool = features.iter().flatten().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (train, eval) = match spec.task {
        Task::Classification => {
            let dirs = feature_directions(pool, spec.input_dim, &mut rng);
            let f = spec.features_per_subtask;
            let c = spec.classes_per_subtask;
            let gen = |stream: u64, per: usize| {
                let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
                r.set_stream(stream);
                let mut out = Vec::with_capacity(per * spec.num_subtasks);
                for (i, feats) in features.iter().enumerate() {
                    for k in 0..per {
                        let class = k % c;
                        let signs = loop {
                            let s: Vec<bool> = (0..f).map(|_| r.gen()).collect();
                            if class_of(&s, c) == class {
                                break s;
                            }
                        };
                        let patches = (0..spec.seq_len)
                            .map(|_| {
                                let mut x: Vec<f64> = (0..spec.input_dim)
                                    .map(|_| spec.noise * Distribution::<f64>::sample(&StandardNormal, &mut r))
                                    .collect();
                                for (s, &fid) in feats.iter().enumerate() {
                                    let a = if signs[s] { 1.0 } else { -1.0 } * r.gen_range(0.5..1.5);
                                    x.iter_mut().zip(&dirs[fid]).for_each(|(xv, dv)| *xv += a * dv);
                                }
                                x
                            })
                            .collect();
                        out.push(Example { subtask: i, input: Input::Patches(patches), targets: vec![i * c + class] });
                    }
                }
                out
            };
            (gen(1, spec.samples_per_subtask), gen(2, spec.eval_samples_per_subtask))
        }
        Task::NextToken => {
            let gen = |stream: u64, per: usize| {
                let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
                r.set_stream(stream);
                let mut out = Vec::with_capacity(per * spec.num_subtasks);
                for (i, feats) in features.iter().enumerate() {
                    for _ in 0..per {
                        let mut slot = r.gen_range(0..feats.len());
                        let mut seq = Vec::with_capacity(spec.seq_len + 1);
                        seq.push(feats[slot]);
                        for _ in 0..spec.seq_len {
                            slot = if r.gen::<f64>() < spec.noise {
                                r.gen_range(0..feats.len())
                            } else {
                                (slot + 1) % feats.len()
                            };
                            seq.push(feats[slot]);
                        }
                        let targets = seq[1..].to_vec();
                        seq.pop();
                        out.push(Example { subtask: i, input: Input::Tokens(seq), targets });
                    }
                }
                out
            };
            (gen(1, spec.samples_per_subtask), gen(2, spec.eval_samples_per_subtask))
        }
    };
    Ok(Dataset {
        spec: spec.clone(),
        subtask_names: (0..spec.num_subtasks).map(subtask_name).collect(),
        features,
        train,
        eval,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    pub fn subtask_index(&self, name: &str) -> Result<usize> {
        self.subtask_names
            .iter()
            .position(|n| n == name)
            .or_else(|| name.parse().ok().filter(|&i: &usize| i < self.subtask_names.len()))
            .ok_or_else(|| Error::Validation(format!("unknown subtask '{name}'")))
    }

    /// Examples of one subtask, or all examples for `None`.
    pub fn examples(&self, split: Split, subtask: Option<usize>) -> Vec<&Example> {
        self.split(split).iter().filter(|e| subtask.is_none_or(|s| e.subtask == s)).collect()
    }

    /// Stable identifier for stats bookkeeping, e.g. `toy-s3/train/A` or `toy-s3/train/all`.
    pub fn dataset_id(&self, split: Split, subtask: Option<usize>) -> String {
        let part = subtask.map_or("all".to_string(), |s| self.subtask_names[s].clone());
        format!("toy-s{}/{}/{}", self.spec.seed, split.name(), part)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new()
            .with_metadata("kind", "toy_dataset")?
            .with_metadata("spec", &self.spec)?
            .with_metadata("subtask_names", &self.subtask_names)?
            .with_metadata("features", &self.features)?;
        for split in [Split::Train, Split::Eval] {
            let ex = self.split(split);
            let name = split.name();
            let n = ex.len();
            a.push(Tensor::i64(format!("{name}.subtask"), vec![n], ex.iter().map(|e| e.subtask as i64).collect())?);
            let r = ex.first().map_or(0, |e| e.targets.len());
            a.push(Tensor::i64(
                format!("{name}.targets"),
                vec![n, r],
                ex.iter().flat_map(|e| e.targets.iter().map(|&t| t as i64)).collect(),
            )?);
            match self.spec.task {
                Task::Classification => {
                    let data: Vec<f64> = ex
                        .iter()
                        .flat_map(|e| match &e.input {
                            Input::Patches(p) => p.iter().flatten().copied().collect::<Vec<_>>(),
                            Input::Tokens(_) => vec![],
                        })
                        .collect();
                    a.push(Tensor::f64(format!("{name}.inputs"), vec![n, self.spec.seq_len, self.spec.input_dim], data)?);
                }
                Task::NextToken => {
                    let data: Vec<i64> = ex
                        .iter()
                        .flat_map(|e| match &e.input {
                            Input::Tokens(t) => t.iter().map(|&x| x as i64).collect::<Vec<_>>(),
                            Input::Patches(_) => vec![],
                        })
                        .collect();
                    a.push(Tensor::i64(format!("{name}.inputs"), vec![n, self.spec.seq_len], data)?);
                }
            }
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let spec: SyntheticTaskSpec = a.meta("spec")?;
        spec.validate()?;
        let mut splits = Vec::new();
        for split in [Split::Train, Split::Eval] {
            let name = split.name();
            let subtask = a.require(&format!("{name}.subtask"))?.as_i64()?;
            let targets_t = a.require(&format!("{name}.targets"))?;
            let inputs_t = a.require(&format!("{name}.inputs"))?;
            let n = subtask.len();
            ensure!(targets_t.shape.first() == Some(&n), Format, "{name}.targets row count mismatch");
            ensure!(inputs_t.shape.first() == Some(&n), Format, "{name}.inputs row count mismatch");
            let r = targets_t.shape.get(1).copied().unwrap_or(0);
            let targets = targets_t.as_i64()?;
            let to_idx = |v: i64| usize::try_from(v).map_err(|_| Error::Format(format!("negative id in {name}")));
            let mut out = Vec::with_capacity(n);
            let width = inputs_t.numel() / n.max(1);
            let inputs_f = (spec.task == Task::Classification).then(|| inputs_t.to_f64());
            for k in 0..n {
                let input = match &inputs_f {
                    Some(f) => Input::Patches(f[k * width..(k + 1) * width].chunks(spec.input_dim).map(<[f64]>::to_vec).collect()),
                    None => Input::Tokens(
                        inputs_t.as_i64()?[k * width..(k + 1) * width].iter().map(|&v| to_idx(v)).collect::<Result<_>>()?,
                    ),
                };
                out.push(Example {
                    subtask: to_idx(subtask[k])?,
                    input,
                    targets: targets[k * r..(k + 1) * r].iter().map(|&v| to_idx(v)).collect::<Result<_>>()?,
                });
            }
            splits.push(out);
        }
        let eval = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Self {
            subtask_names: a.meta("subtask_names")?,
            features: a.meta("features")?,
            spec,
            train,
            eval,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    pub fn manifest(&self, archive_path: impl AsRef<Path>) -> DatasetManifest {
        DatasetManifest {
            spec: self.spec.clone(),
            subtask_names: self.subtask_names.clone(),
            features: self.features.clone(),
            train_count: self.train.len(),
            eval_count: self.eval.len(),
            archive_path: archive_path.as_ref().display().to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task) -> SyntheticTaskSpec {
        let mut s = SyntheticTaskSpec::default_for(task);
        s.samples_per_subtask = 16;
        s.eval_samples_per_subtask = 8;
        s
    }

    #[test]
    fn identity_relatedness_gives_disjoint_features() {
        let s = SyntheticTaskSpec::with_pairs(Task::Classification, 4, &[]);
        let f = s.allocate_features();
        for i in 0..4 {
            for j in 0..i {
                assert!(f[i].iter().all(|x| !f[j].contains(x)));
            }
        }
    }

    #[test]
    fn full_relatedness_shares_everything() {
        let s = SyntheticTaskSpec::with_pairs(Task::Classification, 3, &[(0, 1, 1.0)]);
        let f = s.allocate_features();
        assert_eq!(f[0], f[1]);
        assert!(f[2].iter().all(|x| !f[0].contains(x)));
    }

    #[test]
    fn partial_sharing_rounds() {
        let s = SyntheticTaskSpec::with_pairs(Task::Classification, 3, &[(0, 1, 0.8)]);
        let f = s.allocate_features();
        assert_eq!(f[1].iter().filter(|x| f[0].contains(x)).count(), 3);
    }

    #[test]
    fn validation() {
        let mut s = spec(Task::Classification);
        s.relatedness[0][1] = 0.3;
        assert!(gen_synthetic(&s).is_err());
        let mut s = spec(Task::Classification);
        s.relatedness[2][2] = 0.9;
        assert!(gen_synthetic(&s).is_err());
        let mut s = spec(Task::Classification);
        s.relatedness.pop();
        assert!(gen_synthetic(&s).is_err());
        let mut s = spec(Task::Classification);
        s.features_per_subtask = 1;
        s.classes_per_subtask = 3;
        assert!(gen_synthetic(&s).is_err());
    }

    #[test]
    fn two_class_rule_is_parity() {
        assert_eq!(class_of(&[true, false, false, false], 2), 1);
        assert_eq!(class_of(&[true, true, true, false], 2), 0);
        assert_eq!(class_of(&[false, true, false, true], 2), 0);
        assert_eq!(class_of(&[false, false, true, true], 2), 1);
    }

    #[test]
    fn deterministic_and_seeded() {
        for task in [Task::Classification, Task::NextToken] {
            let s = spec(task);
            assert_eq!(gen_synthetic(&s).unwrap(), gen_synthetic(&s).unwrap());
            let mut t = s.clone();
            t.seed = 1;
            assert_ne!(gen_synthetic(&s).unwrap().train, gen_synthetic(&t).unwrap().train);
        }
    }

    #[test]
    fn shapes_and_balance() {
        let d = gen_synthetic(&spec(Task::Classification)).unwrap();
        assert_eq!(d.train.len(), 64);
        assert_eq!(d.eval.len(), 32);
        for i in 0..4 {
            let ex = d.examples(Split::Train, Some(i));
            assert_eq!(ex.len(), 16);
            assert_eq!(ex.iter().filter(|e| e.targets[0] == 2 * i).count(), 8);
        }
        let n = gen_synthetic(&spec(Task::NextToken)).unwrap();
        for e in &n.train {
            let Input::Tokens(t) = &e.input else { panic!() };
            assert_eq!(t.len(), 8);
            assert_eq!(e.targets.len(), 8);
            assert_eq!(&t[1..], &e.targets[..7]);
            assert!(t.iter().all(|x| n.features[e.subtask].contains(x)));
        }
    }

    #[test]
    fn archive_round_trip() {
        for task in [Task::Classification, Task::NextToken] {
            let d = gen_synthetic(&spec(task)).unwrap();
            let bytes = d.to_archive().unwrap().to_bytes().unwrap();
            assert_eq!(Dataset::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap(), d);
        }
    }

    #[test]
    fn subtask_lookup() {
        let d = gen_synthetic(&spec(Task::Classification)).unwrap();
        assert_eq!(d.subtask_index("C").unwrap(), 2);
        assert_eq!(d.subtask_index("1").unwrap(), 1);
        assert!(d.subtask_index("Z").is_err());
        assert_eq!(d.dataset_id(Split::Eval, Some(0)), "toy-s0/eval/A");
    }
}
