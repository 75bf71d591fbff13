//! Concept prompting and aggregating network for explainable diagnosis.
//!
//! A small vision transformer is steered by concept-aware prompt tokens that
//! a cross-attention generator derives from each layer's token map. The
//! per-layer concept embeddings are mixed by a linear selector, aligned with
//! frozen text embeddings of each concept's candidate values, and pooled by
//! a gated head into a diagnosis. Concept probabilities form the bottleneck,
//! so they can be edited at test time to probe how the diagnosis depends on
//! them.

pub mod alignment;
pub mod autodiff;
pub mod ceg;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnosis;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod intervention;
pub mod model;
pub mod params;
pub mod schema;
pub mod service;

pub use error::{CopaError, Result};
pub use model::{AblationFlags, CopaModel, ModelConfig, Prediction};
pub use schema::{ConceptDef, ConceptSchema};
