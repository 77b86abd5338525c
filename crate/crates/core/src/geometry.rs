//! The (layer, neuron) coordinate system shared by every neuron-indexed structure.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Layer count and MLP width per layer for one model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub model_id: String,
    pub num_layers: usize,
    pub neurons_per_layer: Vec<usize>,
}

/// A single post-activation MLP neuron. Serialized as `[layer, neuron]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct NeuronRef {
    pub layer: usize,
    pub neuron: usize,
}

impl NeuronRef {
    pub fn new(layer: usize, neuron: usize) -> Self {
        Self { layer, neuron }
    }
}

impl From<(usize, usize)> for NeuronRef {
    fn from((layer, neuron): (usize, usize)) -> Self {
        Self { layer, neuron }
    }
}

impl From<NeuronRef> for (usize, usize) {
    fn from(r: NeuronRef) -> Self {
        (r.layer, r.neuron)
    }
}

impl ModelGeometry {
    pub fn new(model_id: impl Into<String>, neurons_per_layer: Vec<usize>) -> Result<Self> {
        let g = Self {
            model_id: model_id.into(),
            num_layers: neurons_per_layer.len(),
            neurons_per_layer,
        };
        g.validate()?;
        Ok(g)
    }

    /// `num_layers` layers of identical width.
    pub fn uniform(model_id: impl Into<String>, num_layers: usize, width: usize) -> Result<Self> {
        Self::new(model_id, vec![width; num_layers])
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_layers >= 1, Validation, "geometry must have at least one layer");
        ensure!(
            self.neurons_per_layer.len() == self.num_layers,
            Validation,
            "geometry lists {} layer widths for {} layers",
            self.neurons_per_layer.len(),
            self.num_layers
        );
        if let Some(l) = self.neurons_per_layer.iter().position(|&n| n == 0) {
            return Err(crate::Error::Validation(format!("layer {l} has zero neurons")));
        }
        Ok(())
    }

    pub fn total_neurons(&self) -> usize {
        self.neurons_per_layer.iter().sum()
    }

    pub fn layer_width(&self, layer: usize) -> Option<usize> {
        self.neurons_per_layer.get(layer).copied()
    }

    /// Offset of the first neuron of `layer` in the flattened layer-major order.
    pub fn layer_offset(&self, layer: usize) -> usize {
        self.neurons_per_layer[..layer].iter().sum()
    }

    pub fn contains(&self, r: NeuronRef) -> bool {
        self.layer_width(r.layer).is_some_and(|w| r.neuron < w)
    }

    pub fn flat_index(&self, r: NeuronRef) -> Option<usize> {
        self.contains(r).then(|| self.layer_offset(r.layer) + r.neuron)
    }

    /// All neurons in ascending (layer, neuron) order.
    pub fn iter(&self) -> impl Iterator<Item = NeuronRef> + '_ {
        self.neurons_per_layer
            .iter()
            .enumerate()
            .flat_map(|(l, &w)| (0..w).map(move |i| NeuronRef::new(l, i)))
    }

    /// Checks that `other` describes the same neuron index space. Model ids may differ.
    pub fn ensure_compatible(&self, other: &ModelGeometry) -> Result<()> {
        ensure!(
            self.neurons_per_layer == other.neurons_per_layer,
            Geometry,
            "layer widths {:?} do not match {:?}",
            self.neurons_per_layer,
            other.neurons_per_layer
        );
        Ok(())
    }

    /// Checks that a ragged per-layer table matches this geometry.
    pub fn ensure_shape<T>(&self, per_layer: &[Vec<T>]) -> Result<()> {
        ensure!(
            per_layer.len() == self.num_layers,
            Geometry,
            "expected {} layers, got {}",
            self.num_layers,
            per_layer.len()
        );
        for (l, (row, &w)) in per_layer.iter().zip(&self.neurons_per_layer).enumerate() {
            ensure!(row.len() == w, Geometry, "layer {l}: expected {w} neurons, got {}", row.len());
        }
        Ok(())
    }

    pub fn zeros<T: Clone + Default>(&self) -> Vec<Vec<T>> {
        self.neurons_per_layer.iter().map(|&w| vec![T::default(); w]).collect()
    }

    /// Splits a layer-major flat vector back into per-layer rows.
    pub fn unflatten<T: Clone>(&self, flat: &[T]) -> Result<Vec<Vec<T>>> {
        ensure!(
            flat.len() == self.total_neurons(),
            Geometry,
            "expected {} values, got {}",
            self.total_neurons(),
            flat.len()
        );
        let mut out = Vec::with_capacity(self.num_layers);
        let mut at = 0;
        for &w in &self.neurons_per_layer {
            out.push(flat[at..at + w].to_vec());
            at += w;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_geometry() {
        assert!(ModelGeometry::new("m", vec![]).is_err());
        assert!(ModelGeometry::new("m", vec![4, 0]).is_err());
        let bad = ModelGeometry {
            model_id: "m".into(),
            num_layers: 2,
            neurons_per_layer: vec![3],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn flat_indexing() {
        let g = ModelGeometry::new("m", vec![2, 3]).unwrap();
        assert_eq!(g.total_neurons(), 5);
        assert_eq!(g.flat_index(NeuronRef::new(1, 2)), Some(4));
        assert_eq!(g.flat_index(NeuronRef::new(1, 3)), None);
        assert_eq!(g.iter().count(), 5);
        let rows = g.unflatten(&[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(rows, vec![vec![0, 1], vec![2, 3, 4]]);
    }

    #[test]
    fn neuron_ref_serializes_as_pair() {
        let s = serde_json::to_string(&NeuronRef::new(1, 7)).unwrap();
        assert_eq!(s, "[1,7]");
        let r: NeuronRef = serde_json::from_str("[0,2]").unwrap();
        assert_eq!(r, NeuronRef::new(0, 2));
    }
}
