//! Neuron-level modularity analysis for transformer MLP layers.
//!
//! The pipeline: collect mean-|activation| [`stats`] per dataset, [`scoring`] of
//! neurons by their activation ratio between a reference and an unlearn dataset,
//! selection and calibrated pruning, balanced k-means [`moefication`] of each
//! layer, and [`analysis`] of how selections overlap and how they concentrate in
//! clusters. [`toy`] provides a small trainable transformer to run all of it on.

pub mod analysis;
pub mod archive;
pub mod error;
pub mod geometry;
pub mod moefication;
pub mod report;
pub mod rng;
pub mod scoring;
pub mod stats;
pub mod toy;

pub use error::{Error, Result};
pub use geometry::{ModelGeometry, NeuronRef};
