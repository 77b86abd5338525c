use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::ModelGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    NextToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    /// Number of classes, or vocabulary size for next-token models.
    pub num_classes: usize,
    /// Patch width for classification models; unused for next-token models.
    pub input_dim: usize,
    /// Maximum number of patches or tokens per input.
    pub max_seq_len: usize,
    pub task: Task,
    pub seed: u64,
}

impl ToyConfig {
    pub const LAYERS: std::ops::RangeInclusive<usize> = 2..=4;
    pub const MODEL_DIM: std::ops::RangeInclusive<usize> = 16..=64;
    pub const MLP_DIM: std::ops::RangeInclusive<usize> = 64..=256;

    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Classification => Self {
                num_layers: 2,
                model_dim: 16,
                mlp_dim: 64,
                num_heads: 2,
                num_classes: 8,
                input_dim: 16,
                max_seq_len: 4,
                task,
                seed: 0,
            },
            Task::NextToken => Self {
                num_layers: 2,
                model_dim: 16,
                mlp_dim: 64,
                num_heads: 2,
                num_classes: 16,
                input_dim: 0,
                max_seq_len: 8,
                task,
                seed: 0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            Self::LAYERS.contains(&self.num_layers),
            Validation,
            "num_layers {} outside {:?}",
            self.num_layers,
            Self::LAYERS
        );
        ensure!(
            Self::MODEL_DIM.contains(&self.model_dim),
            Validation,
            "model_dim {} outside {:?}",
            self.model_dim,
            Self::MODEL_DIM
        );
        ensure!(
            Self::MLP_DIM.contains(&self.mlp_dim),
            Validation,
            "mlp_dim {} outside {:?}",
            self.mlp_dim,
            Self::MLP_DIM
        );
        ensure!(
            self.num_heads > 0 && self.model_dim.is_multiple_of(self.num_heads),
            Validation,
            "model_dim {} not divisible by num_heads {}",
            self.model_dim,
            self.num_heads
        );
        ensure!(self.num_classes >= 2, Validation, "need at least 2 classes/tokens");
        ensure!(self.max_seq_len >= 1, Validation, "max_seq_len must be positive");
        if self.task == Task::Classification {
            ensure!(self.input_dim >= 1, Validation, "input_dim must be positive");
        }
        Ok(())
    }

    /// Positional embedding rows (one extra for the CLS token).
    pub fn positions(&self) -> usize {
        match self.task {
            Task::Classification => self.max_seq_len + 1,
            Task::NextToken => self.max_seq_len,
        }
    }

    pub fn geometry(&self) -> ModelGeometry {
        ModelGeometry {
            model_id: "toy".into(),
            num_layers: self.num_layers,
            neurons_per_layer: vec![self.mlp_dim; self.num_layers],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ToyConfig::default_for(Task::Classification).validate().unwrap();
        ToyConfig::default_for(Task::NextToken).validate().unwrap();
    }

    #[test]
    fn range_edges() {
        let mut c = ToyConfig::default_for(Task::Classification);
        c.mlp_dim = 256;
        c.model_dim = 64;
        c.num_layers = 4;
        c.validate().unwrap();
        c.mlp_dim = 257;
        assert!(c.validate().is_err());
        c.mlp_dim = 63;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = ToyConfig::default_for(Task::NextToken);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"next_token\""));
        assert_eq!(serde_json::from_str::<ToyConfig>(&s).unwrap(), c);
    }
}
