//! Balanced k-means over per-neuron input weight vectors ("MoEfication").
//!
//! Each MLP layer is split independently into `k` clusters whose sizes differ by
//! at most one. A neuron's vector is its column of `W_in` (shape
//! `hidden_dim x num_neurons`).

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Tensor};
use crate::error::{ensure, Error, Result};
use crate::geometry::ModelGeometry;
use crate::rng::SplitMix64;

pub const DEFAULT_MAX_ITERS: usize = 100;
/// Relative slack allowed when checking that an iteration did not increase the objective.
pub const OBJECTIVE_TOLERANCE: f64 = 1e-9;

/// Input weights of one MLP layer, row-major `hidden_dim x num_neurons`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub layer: usize,
    pub hidden_dim: usize,
    pub num_neurons: usize,
    pub w_in: Vec<f64>,
}

impl LayerWeights {
    pub fn new(layer: usize, hidden_dim: usize, num_neurons: usize, w_in: Vec<f64>) -> Result<Self> {
        ensure!(
            w_in.len() == hidden_dim * num_neurons,
            Validation,
            "layer {layer}: W_in has {} entries, expected {hidden_dim}x{num_neurons}",
            w_in.len()
        );
        ensure!(
            w_in.iter().all(|x| x.is_finite()),
            Validation,
            "layer {layer}: W_in has non-finite entries"
        );
        Ok(Self { layer, hidden_dim, num_neurons, w_in })
    }

    /// Builds from one vector per neuron.
    pub fn from_neuron_vectors(layer: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        let n = vectors.len();
        let d = vectors.first().map_or(0, Vec::len);
        ensure!(vectors.iter().all(|v| v.len() == d), Validation, "ragged neuron vectors");
        let mut w = vec![0.0; d * n];
        for (i, v) in vectors.iter().enumerate() {
            for (r, &x) in v.iter().enumerate() {
                w[r * n + i] = x;
            }
        }
        Self::new(layer, d, n, w)
    }

    pub fn neuron_vector(&self, i: usize) -> Vec<f64> {
        (0..self.hidden_dim).map(|r| self.w_in[r * self.num_neurons + i]).collect()
    }

    pub fn neuron_vectors(&self) -> Vec<Vec<f64>> {
        (0..self.num_neurons).map(|i| self.neuron_vector(i)).collect()
    }

    pub fn tensor_name(layer: usize) -> String {
        format!("w_in.{layer}")
    }

    /// Reads `w_in.{l}` tensors for every layer of the archive's `geometry` metadata.
    pub fn from_archive(a: &Archive) -> Result<(ModelGeometry, Vec<LayerWeights>)> {
        let geometry: ModelGeometry = a.meta("geometry")?;
        geometry.validate()?;
        let layers = (0..geometry.num_layers)
            .map(|l| {
                let t = a
                    .get(&Self::tensor_name(l))
                    .ok_or_else(|| Error::Validation(format!("weights archive is missing layer {l}")))?;
                ensure!(t.shape.len() == 2, Format, "tensor '{}' must be 2-D", t.name);
                ensure!(
                    t.shape[1] == geometry.neurons_per_layer[l],
                    Geometry,
                    "layer {l}: W_in has {} columns, geometry says {}",
                    t.shape[1],
                    geometry.neurons_per_layer[l]
                );
                Self::new(l, t.shape[0], t.shape[1], t.to_f64())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((geometry, layers))
    }

    pub fn to_archive(geometry: &ModelGeometry, layers: &[LayerWeights]) -> Result<Archive> {
        let mut a = Archive::new()
            .with_metadata("kind", "mlp_input_weights")?
            .with_metadata("geometry", geometry)?;
        for w in layers {
            a.push(Tensor::f64(
                Self::tensor_name(w.layer),
                vec![w.hidden_dim, w.num_neurons],
                w.w_in.clone(),
            )?);
        }
        Ok(a)
    }
}

/// Cluster sizes: `ceil(n/k)` for the first `n mod k` clusters, `floor(n/k)` for the rest.
pub fn capacities(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|c| n / k + usize::from(c < n % k)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy capacity-constrained assignment.
///
/// All (point, cluster) pairs are swept in ascending order of (squared distance,
/// point index, cluster index); a point takes the pair's cluster if it is still
/// unassigned and the cluster has room.
pub fn balanced_assign(points: &[Vec<f64>], centroids: &[Vec<f64>], capacities: &[usize]) -> Result<Vec<usize>> {
    let (n, k) = (points.len(), centroids.len());
    ensure!(capacities.len() == k, Validation, "{} capacities for {k} centroids", capacities.len());
    let total: usize = capacities.iter().sum();
    ensure!(total == n, Validation, "capacities sum to {total}, expected {n} points");
    if let Some(lo) = n.checked_div(k) {
        let hi = n.div_ceil(k);
        ensure!(
            capacities.iter().all(|&c| c == lo || c == hi),
            Validation,
            "capacities must each be {lo} or {hi}"
        );
    }

    let mut pairs: Vec<(f64, u32, u32)> = Vec::with_capacity(n * k);
    for (p, x) in points.iter().enumerate() {
        for (c, mu) in centroids.iter().enumerate() {
            pairs.push((sq_dist(x, mu), p as u32, c as u32));
        }
    }
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut room = capacities.to_vec();
    let mut assignment = vec![usize::MAX; n];
    let mut left = n;
    for &(_, p, c) in &pairs {
        let (p, c) = (p as usize, c as usize);
        if assignment[p] == usize::MAX && room[c] > 0 {
            assignment[p] = c;
            room[c] -= 1;
            left -= 1;
            if left == 0 {
                break;
            }
        }
    }
    Ok(assignment)
}

fn centroids_of(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (x, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(x) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

/// Within-cluster sum of squared distances to the given centroids.
pub fn objective(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(assignment).map(|(x, &c)| sq_dist(x, &centroids[c])).sum()
}

/// k-means++ seeding driven by SplitMix64.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut SplitMix64) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.below(n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.next_f64() * total;
            let mut pick = nearest.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // every point coincides with a center already
            rng.below(n)
        };
        let c = points[idx].clone();
        for (best, x) in nearest.iter_mut().zip(points) {
            *best = best.min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerClustering {
    pub assignment: Vec<usize>,
    pub objective: f64,
    /// Objective after each accepted iteration, starting with the seeded assignment.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Balanced k-means on the neuron columns of one layer.
///
/// Points are processed in lexicographic order of their coordinates, so the result
/// does not depend on how neurons are numbered (apart from ties between identical
/// vectors). Stops at a fixed-point assignment, at `max_iters`, or before any
/// iteration that would increase the objective.
pub fn cluster_layer(weights: &LayerWeights, k: usize, seed: u64, max_iters: usize) -> Result<LayerClustering> {
    let n = weights.num_neurons;
    ensure!(k >= 1, Validation, "k must be positive");
    ensure!(k <= n, Validation, "k = {k} exceeds the {n} neurons of layer {}", weights.layer);
    ensure!(max_iters >= 1, Validation, "max_iters must be positive");

    let raw = weights.neuron_vectors();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        raw[a]
            .iter()
            .zip(&raw[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let points: Vec<Vec<f64>> = order.iter().map(|&i| raw[i].clone()).collect();

    let caps = capacities(n, k);
    let mut rng = SplitMix64::new(seed);
    let seeds = seed_centroids(&points, k, &mut rng);

    let mut assignment = balanced_assign(&points, &seeds, &caps)?;
    let mut centroids = centroids_of(&points, &assignment, k);
    let mut obj = objective(&points, &assignment, &centroids);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 1;

    while iterations < max_iters {
        let next = balanced_assign(&points, &centroids, &caps)?;
        if next == assignment {
            converged = true;
            break;
        }
        let next_centroids = centroids_of(&points, &next, k);
        let next_obj = objective(&points, &next, &next_centroids);
        if next_obj > obj + OBJECTIVE_TOLERANCE * obj.abs() {
            break;
        }
        iterations += 1;
        assignment = next;
        centroids = next_centroids;
        obj = next_obj;
        trace.push(obj);
    }

    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = assignment[rank];
    }
    Ok(LayerClustering {
        assignment: out,
        objective: obj,
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// Per-layer balanced clustering of a whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub geometry: ModelGeometry,
    pub k: usize,
    pub seed: u64,
    /// `assignment[l][i]` is the cluster of neuron `i` in layer `l`.
    #[serde(skip)]
    pub assignment: Vec<Vec<usize>>,
    pub objective: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClusterFile {
    #[serde(flatten)]
    meta: ClusterAssignment,
    archive_path: String,
}

/// Clusters every layer independently with the same `k` and `seed`.
pub fn cluster_model(
    geometry: &ModelGeometry,
    weights: &[LayerWeights],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterAssignment> {
    geometry.validate()?;
    let mut by_layer: Vec<Option<&LayerWeights>> = vec![None; geometry.num_layers];
    for w in weights {
        ensure!(w.layer < geometry.num_layers, Validation, "weights for unknown layer {}", w.layer);
        ensure!(
            w.num_neurons == geometry.neurons_per_layer[w.layer],
            Geometry,
            "layer {}: {} neuron columns, geometry says {}",
            w.layer,
            w.num_neurons,
            geometry.neurons_per_layer[w.layer]
        );
        by_layer[w.layer] = Some(w);
    }
    let layers: Vec<&LayerWeights> = by_layer
        .into_iter()
        .enumerate()
        .map(|(l, w)| w.ok_or_else(|| Error::Validation(format!("missing weights for layer {l}"))))
        .collect::<Result<_>>()?;

    let results = layers
        .par_iter()
        .map(|w| cluster_layer(w, k, seed, max_iters))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterAssignment {
        geometry: geometry.clone(),
        k,
        seed,
        objective: results.iter().map(|r| r.objective).collect(),
        assignment: results.into_iter().map(|r| r.assignment).collect(),
    })
}

impl ClusterAssignment {
    pub fn cluster_sizes(&self, layer: usize) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment[layer] {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.geometry.ensure_shape(&self.assignment)?;
        ensure!(self.k >= 1, Validation, "k must be positive");
        for (l, row) in self.assignment.iter().enumerate() {
            ensure!(
                row.iter().all(|&c| c < self.k),
                Validation,
                "layer {l} has cluster ids >= k = {}",
                self.k
            );
            let sizes = self.cluster_sizes(l);
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            ensure!(hi - lo <= 1, Validation, "layer {l} is unbalanced: sizes range {lo}..={hi}");
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let flat: Vec<i64> = self.assignment.iter().flatten().map(|&c| c as i64).collect();
        let mut a = Archive::new()
            .with_metadata("kind", "cluster_assignment")?
            .with_metadata("geometry", &self.geometry)?
            .with_metadata("k", self.k)?;
        a.push(Tensor::i64("assignment", vec![flat.len()], flat)?);
        Ok(a)
    }

    /// Writes the JSON summary and the `assignment` tensor archive it points to.
    pub fn write(&self, json_path: impl AsRef<Path>, archive_path: impl AsRef<Path>) -> Result<()> {
        let (json_path, archive_path) = (json_path.as_ref(), archive_path.as_ref());
        self.to_archive()?.write(archive_path)?;
        let file = ClusterFile {
            meta: self.clone(),
            archive_path: relative_to(archive_path, json_path),
        };
        std::fs::write(json_path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(json_path, e))
    }

    pub fn read(json_path: impl AsRef<Path>) -> Result<Self> {
        let json_path = json_path.as_ref();
        let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let file: ClusterFile = serde_json::from_str(&text)?;
        let mut archive_path = PathBuf::from(&file.archive_path);
        if archive_path.is_relative() {
            archive_path = json_path.parent().unwrap_or(Path::new(".")).join(archive_path);
        }
        let archive = Archive::read(&archive_path)?;
        let mut out = file.meta;
        let flat = archive.require("assignment")?.as_i64()?;
        ensure!(
            flat.iter().all(|&c| c >= 0),
            Validation,
            "negative cluster id in {}",
            archive_path.display()
        );
        let flat: Vec<usize> = flat.iter().map(|&c| c as usize).collect();
        out.assignment = out.geometry.unflatten(&flat)?;
        out.validate()?;
        Ok(out)
    }
}

fn relative_to(target: &Path, json_path: &Path) -> String {
    match (target.parent(), json_path.parent()) {
        (Some(a), Some(b)) if a == b => target.file_name().unwrap().to_string_lossy().into_owned(),
        _ => target.display().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(points: &[Vec<f64>]) -> LayerWeights {
        LayerWeights::from_neuron_vectors(0, points).unwrap()
    }

    fn pts(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn capacity_rule() {
        assert_eq!(capacities(10, 3), vec![4, 3, 3]);
        assert_eq!(capacities(3072, 96), vec![32; 96]);
        assert_eq!(capacities(14336, 128), vec![112; 128]);
    }

    #[test]
    fn long_rectangle_splits_left_right() {
        let p = pts(&[&[0.0, 0.0], &[0.0, 1.0], &[10.0, 0.0], &[10.0, 1.0]]);
        let r = cluster_layer(&layer(&p), 2, 1, 100).unwrap();
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_eq!(r.assignment[2], r.assignment[3]);
        assert_ne!(r.assignment[0], r.assignment[2]);
        assert!((r.objective - 1.0).abs() < 1e-12);
    }

    #[test]
    fn n_equals_k_is_singletons() {
        let p = pts(&[&[0.0], &[3.0], &[-1.0], &[7.5]]);
        let r = cluster_layer(&layer(&p), 4, 3, 100).unwrap();
        let mut ids = r.assignment.clone();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn identical_points_are_deterministic() {
        let p = vec![vec![1.0, 2.0]; 4];
        let a = cluster_layer(&layer(&p), 2, 9, 100).unwrap();
        let b = cluster_layer(&layer(&p), 2, 9, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.objective, 0.0);
        let mut sizes = [0; 2];
        a.assignment.iter().for_each(|&c| sizes[c] += 1);
        assert_eq!(sizes, [2, 2]);
    }

    #[test]
    fn k_validation() {
        let p = pts(&[&[0.0], &[1.0]]);
        assert!(matches!(cluster_layer(&layer(&p), 0, 0, 10), Err(Error::Validation(_))));
        assert!(matches!(cluster_layer(&layer(&p), 3, 0, 10), Err(Error::Validation(_))));
    }

    #[test]
    fn assign_examples() {
        let p = pts(&[&[0.0], &[5.0]]);
        assert_eq!(balanced_assign(&p, &p, &[1, 1]).unwrap(), vec![0, 1]);

        let p = pts(&[&[0.0], &[1.0], &[100.0]]);
        let c = pts(&[&[0.0], &[100.0]]);
        assert_eq!(balanced_assign(&p, &c, &[2, 1]).unwrap(), vec![0, 0, 1]);

        // equidistant: point 0 claims cluster 0 first, then cluster 0 is full
        let p = pts(&[&[0.0, 1.0], &[0.0, -1.0]]);
        let c = pts(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        assert_eq!(balanced_assign(&p, &c, &[1, 1]).unwrap(), vec![0, 1]);

        assert!(matches!(balanced_assign(&p, &c, &[1, 2]), Err(Error::Validation(_))));
    }

    #[test]
    fn assign_matches_brute_force_on_line() {
        // every capacity-respecting assignment of 3 points into caps [2, 1]
        let p = pts(&[&[0.0], &[1.0], &[100.0]]);
        let c = pts(&[&[0.0], &[100.0]]);
        let best = (0..3)
            .map(|lone| {
                let a: Vec<usize> = (0..3).map(|i| usize::from(i == lone)).collect();
                (objective(&p, &a, &c), a)
            })
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .unwrap();
        assert_eq!(balanced_assign(&p, &c, &[2, 1]).unwrap(), best.1);
    }

    #[test]
    fn model_layers_are_independent() {
        let a = layer(&pts(&[&[0.0], &[1.0], &[9.0], &[10.0]]));
        let b = layer(&pts(&[&[5.0, 1.0], &[5.0, 2.0], &[-3.0, 0.0], &[-4.0, 0.0], &[0.0, 0.0], &[0.5, 0.5]]));
        let g = ModelGeometry::new("m", vec![4, 6]).unwrap();
        let mut la = a.clone();
        let mut lb = b.clone();
        lb.layer = 1;
        let fwd = cluster_model(&g, &[la.clone(), lb.clone()], 2, 4, 50).unwrap();

        let g2 = ModelGeometry::new("m", vec![6, 4]).unwrap();
        la.layer = 1;
        lb.layer = 0;
        let rev = cluster_model(&g2, &[lb, la], 2, 4, 50).unwrap();
        assert_eq!(fwd.assignment[0], rev.assignment[1]);
        assert_eq!(fwd.assignment[1], rev.assignment[0]);
        fwd.validate().unwrap();

        assert!(cluster_model(&g, &[a], 2, 4, 50).is_err());
    }

    #[test]
    fn vit_shaped_layer_balance() {
        // 3072 neurons in a 4-d weight space, k = 96
        let mut rng = SplitMix64::new(5);
        let vecs: Vec<Vec<f64>> = (0..3072).map(|_| (0..4).map(|_| rng.next_f64()).collect()).collect();
        let r = cluster_layer(&layer(&vecs), 96, 0, 3).unwrap();
        let mut sizes = vec![0; 96];
        r.assignment.iter().for_each(|&c| sizes[c] += 1);
        assert!(sizes.iter().all(|&s| s == 32));
    }

    #[test]
    fn files_round_trip() {
        let g = ModelGeometry::new("m", vec![4]).unwrap();
        let w = layer(&pts(&[&[0.0], &[1.0], &[9.0], &[10.0]]));
        let c = cluster_model(&g, &[w], 2, 0, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path().join("c.json"), dir.path().join("c.nmod")).unwrap();
        assert_eq!(ClusterAssignment::read(dir.path().join("c.json")).unwrap(), c);
    }

    #[test]
    fn weights_archive_round_trip() {
        let g = ModelGeometry::new("m", vec![3]).unwrap();
        let w = LayerWeights::new(0, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(w.neuron_vector(1), vec![2.0, 5.0]);
        let a = LayerWeights::to_archive(&g, std::slice::from_ref(&w)).unwrap();
        let (g2, back) = LayerWeights::from_archive(&a).unwrap();
        assert_eq!(g2, g);
        assert_eq!(back, vec![w]);
    }
}
