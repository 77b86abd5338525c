//! Running per-neuron mean |activation| statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Tensor};
use crate::error::{ensure, Error, Result};
use crate::geometry::ModelGeometry;

pub const STATS_KIND: &str = "activation_stats";

/// Mean absolute activation per (layer, neuron) over the samples of one dataset.
///
/// Accumulation is in f64 regardless of the precision the activations arrive in.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub geometry: ModelGeometry,
    pub dataset_id: String,
    pub mean_abs: Vec<Vec<f64>>,
    pub sample_count: u64,
}

/// Sidecar JSON describing a stats archive on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsManifest {
    pub model_id: String,
    pub dataset_id: String,
    pub geometry: ModelGeometry,
    pub sample_count: u64,
    pub archive_path: String,
}

impl ActivationStats {
    pub fn new(geometry: ModelGeometry, dataset_id: impl Into<String>) -> Result<Self> {
        geometry.validate()?;
        Ok(Self {
            mean_abs: geometry.zeros(),
            geometry,
            dataset_id: dataset_id.into(),
            sample_count: 0,
        })
    }

    /// Folds one sample into the running means.
    ///
    /// The whole sample is checked before any entry is updated, so a rejected
    /// sample leaves the statistics untouched.
    pub fn accumulate(&mut self, sample: &[Vec<f64>]) -> Result<()> {
        self.geometry.ensure_shape(sample)?;
        for (l, row) in sample.iter().enumerate() {
            if let Some(i) = row.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    layer: l,
                    neuron: i,
                    value: row[i],
                });
            }
        }
        self.sample_count += 1;
        let n = self.sample_count as f64;
        for (means, row) in self.mean_abs.iter_mut().zip(sample) {
            for (m, x) in means.iter_mut().zip(row) {
                *m += (x.abs() - *m) / n;
            }
        }
        Ok(())
    }

    /// Same as [`accumulate`](Self::accumulate) for f32 activations.
    pub fn accumulate_f32(&mut self, sample: &[Vec<f32>]) -> Result<()> {
        let wide: Vec<Vec<f64>> = sample
            .iter()
            .map(|row| row.iter().map(|&x| x as f64).collect())
            .collect();
        self.accumulate(&wide)
    }

    /// Count-weighted combination of two accumulations over disjoint samples.
    pub fn merge(&self, other: &ActivationStats) -> Result<ActivationStats> {
        self.geometry.ensure_compatible(&other.geometry)?;
        ensure!(
            self.dataset_id == other.dataset_id,
            Validation,
            "cannot merge stats for dataset '{}' with '{}'",
            self.dataset_id,
            other.dataset_id
        );
        let total = self.sample_count + other.sample_count;
        if other.sample_count == 0 {
            return Ok(self.clone());
        }
        if self.sample_count == 0 {
            return Ok(other.clone());
        }
        let (na, nb) = (self.sample_count as f64, other.sample_count as f64);
        let mean_abs = self
            .mean_abs
            .iter()
            .zip(&other.mean_abs)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| (na * x + nb * y) / (na + nb))
                    .collect()
            })
            .collect();
        Ok(ActivationStats {
            geometry: self.geometry.clone(),
            dataset_id: self.dataset_id.clone(),
            mean_abs,
            sample_count: total,
        })
    }

    /// Merges shards left to right.
    pub fn merge_all<'a>(shards: impl IntoIterator<Item = &'a ActivationStats>) -> Result<ActivationStats> {
        let mut it = shards.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Validation("no stats to merge".into()))?
            .clone();
        it.try_fold(first, |acc, s| acc.merge(s))
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.geometry.ensure_shape(&self.mean_abs)?;
        for (l, row) in self.mean_abs.iter().enumerate() {
            if let Some(i) = row.iter().position(|m| !m.is_finite() || *m < 0.0) {
                return Err(Error::Validation(format!(
                    "mean_abs at layer {l}, neuron {i} is {} (must be finite and >= 0)",
                    row[i]
                )));
            }
        }
        if self.sample_count == 0 {
            ensure!(
                self.mean_abs.iter().flatten().all(|&m| m == 0.0),
                Validation,
                "stats with zero samples must have all-zero means"
            );
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let flat: Vec<f64> = self.mean_abs.iter().flatten().copied().collect();
        let mut a = Archive::new()
            .with_metadata("kind", STATS_KIND)?
            .with_metadata("geometry", &self.geometry)?
            .with_metadata("dataset_id", &self.dataset_id)?
            .with_metadata("sample_count", self.sample_count)?;
        a.push(Tensor::f64("mean_abs", vec![flat.len()], flat)?);
        Ok(a)
    }

    /// Accepts `mean_abs` as either f64 or f32 (exporters may write either).
    pub fn from_archive(a: &Archive) -> Result<Self> {
        let geometry: ModelGeometry = a.meta("geometry")?;
        geometry.validate()?;
        let stats = Self {
            mean_abs: geometry.unflatten(&a.require("mean_abs")?.to_f64())?,
            dataset_id: a.meta("dataset_id")?,
            sample_count: a.meta("sample_count")?,
            geometry,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    pub fn manifest(&self, archive_path: impl AsRef<Path>) -> StatsManifest {
        StatsManifest {
            model_id: self.geometry.model_id.clone(),
            dataset_id: self.dataset_id.clone(),
            geometry: self.geometry.clone(),
            sample_count: self.sample_count,
            archive_path: archive_path.as_ref().display().to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(widths: Vec<usize>) -> ModelGeometry {
        ModelGeometry::new("m", widths).unwrap()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn init_is_zero() {
        let s = ActivationStats::new(geom(vec![4, 4]), "d").unwrap();
        assert_eq!(s.sample_count, 0);
        assert_eq!(s.mean_abs.iter().flatten().count(), 8);
        assert!(s.mean_abs.iter().flatten().all(|&m| m == 0.0));
        let one = ActivationStats::new(geom(vec![1]), "d").unwrap();
        assert_eq!(one.mean_abs, vec![vec![0.0]]);
        let bad = ModelGeometry { model_id: "m".into(), num_layers: 0, neurons_per_layer: vec![] };
        assert!(matches!(ActivationStats::new(bad, "d"), Err(Error::Validation(_))));
    }

    #[test]
    fn accumulate_takes_absolute_running_mean() {
        let mut s = ActivationStats::new(geom(vec![2]), "d").unwrap();
        s.accumulate(&[vec![2.0, -4.0]]).unwrap();
        assert_eq!(s.mean_abs, vec![vec![2.0, 4.0]]);
        assert_eq!(s.sample_count, 1);

        let mut t = ActivationStats::new(geom(vec![1]), "d").unwrap();
        t.accumulate(&[vec![2.0]]).unwrap();
        t.accumulate(&[vec![0.0]]).unwrap();
        assert_eq!(t.mean_abs, vec![vec![1.0]]);
        assert_eq!(t.sample_count, 2);
    }

    #[test]
    fn zero_sample_dilutes() {
        let mut s = ActivationStats::new(geom(vec![3]), "d").unwrap();
        s.accumulate(&[vec![3.0, -6.0, 9.0]]).unwrap();
        s.accumulate(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let before = s.mean_abs[0].clone();
        s.accumulate(&[vec![0.0; 3]]).unwrap();
        for (a, b) in s.mean_abs[0].iter().zip(before) {
            assert!(rel_close(*a, b * 2.0 / 3.0, 1e-12));
        }
    }

    #[test]
    fn accumulate_errors() {
        let mut s = ActivationStats::new(geom(vec![2, 2]), "d").unwrap();
        assert!(matches!(s.accumulate(&[vec![1.0, 2.0]]), Err(Error::Geometry(_))));
        assert!(matches!(
            s.accumulate(&[vec![1.0, 2.0], vec![1.0, 2.0, 3.0]]),
            Err(Error::Geometry(_))
        ));
        let err = s.accumulate(&[vec![1.0, 2.0], vec![f64::NAN, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 1, neuron: 0, .. }));
        assert_eq!(s.sample_count, 0);
    }

    #[test]
    fn merge_is_count_weighted() {
        let g = geom(vec![1]);
        let a = ActivationStats { geometry: g.clone(), dataset_id: "d".into(), mean_abs: vec![vec![2.0]], sample_count: 1 };
        let b = ActivationStats { geometry: g.clone(), dataset_id: "d".into(), mean_abs: vec![vec![4.0]], sample_count: 3 };
        let m = a.merge(&b).unwrap();
        assert_eq!(m.sample_count, 4);
        assert_eq!(m.mean_abs, vec![vec![3.5]]);
        let empty = ActivationStats::new(g, "d").unwrap();
        assert_eq!(a.merge(&empty).unwrap(), a);
        assert_eq!(empty.merge(&a).unwrap(), a);
    }

    #[test]
    fn merge_rejects_mismatch() {
        let a = ActivationStats::new(geom(vec![2]), "d").unwrap();
        let b = ActivationStats::new(geom(vec![3]), "d").unwrap();
        let c = ActivationStats::new(geom(vec![2]), "other").unwrap();
        assert!(matches!(a.merge(&b), Err(Error::Geometry(_))));
        assert!(matches!(a.merge(&c), Err(Error::Validation(_))));
    }

    #[test]
    fn archive_round_trip_and_manifest() {
        let mut s = ActivationStats::new(geom(vec![2, 3]), "train").unwrap();
        s.accumulate(&[vec![0.5, -1.0], vec![1e-310, 2.0, -3.0]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nmod");
        s.write(&p).unwrap();
        let back = ActivationStats::read(&p).unwrap();
        assert_eq!(back, s);
        let m = s.manifest(&p);
        assert_eq!(m.sample_count, 1);
        assert_eq!(m.dataset_id, "train");
    }

    fn samples() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 1..60)
    }

    proptest! {
        #[test]
        fn running_mean_matches_batch_mean(xs in samples()) {
            let g = geom(vec![2, 3]);
            let mut s = ActivationStats::new(g, "d").unwrap();
            for x in &xs {
                s.accumulate(&[x[..2].to_vec(), x[2..].to_vec()]).unwrap();
            }
            let flat: Vec<f64> = s.mean_abs.iter().flatten().copied().collect();
            for (j, m) in flat.iter().enumerate() {
                let direct = xs.iter().map(|x| x[j].abs()).sum::<f64>() / xs.len() as f64;
                prop_assert!(rel_close(*m, direct, 1e-9) || (m - direct).abs() < 1e-12);
            }
        }

        #[test]
        fn sharded_merge_matches_single_pass(xs in samples(), cuts in prop::collection::vec(0usize..60, 0..4)) {
            let g = geom(vec![5]);
            let mut whole = ActivationStats::new(g.clone(), "d").unwrap();
            for x in &xs {
                whole.accumulate(std::slice::from_ref(x)).unwrap();
            }
            let mut bounds: Vec<usize> = cuts.into_iter().map(|c| c % (xs.len() + 1)).collect();
            bounds.push(0);
            bounds.push(xs.len());
            bounds.sort_unstable();
            let shards: Vec<ActivationStats> = bounds
                .windows(2)
                .map(|w| {
                    let mut s = ActivationStats::new(g.clone(), "d").unwrap();
                    for x in &xs[w[0]..w[1]] {
                        s.accumulate(std::slice::from_ref(x)).unwrap();
                    }
                    s
                })
                .collect();
            let merged = ActivationStats::merge_all(&shards).unwrap();
            let reversed = ActivationStats::merge_all(shards.iter().rev()).unwrap();
            prop_assert_eq!(merged.sample_count, whole.sample_count);
            for ((a, b), c) in merged.mean_abs[0].iter().zip(&whole.mean_abs[0]).zip(&reversed.mean_abs[0]) {
                prop_assert!(rel_close(*a, *b, 1e-9) || (a - b).abs() < 1e-12);
                prop_assert!(rel_close(*a, *c, 1e-9) || (a - c).abs() < 1e-12);
            }
        }
    }
}
