//! A small deterministic transformer and synthetic multi-subtask data.

pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod train;

pub use config::{Task, ToyConfig};
pub use data::{gen_synthetic, Dataset, Example, Split, SyntheticTaskSpec};
pub use eval::{collect_stats, evaluate_top1, mlp_input_weights, EvalReport};
pub use model::{build_model, ForwardOutput, Input, ToyTransformer, Weights};
pub use train::{loss_and_gradient, train, TrainConfig, TrainReport};
