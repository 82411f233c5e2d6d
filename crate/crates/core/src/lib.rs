//! Collaborative synthetic-data generation with multiple language-model
//! backends, cross-model sample selection, and a self-boosting weighted
//! small task model.

// Range checks are written `!(x > lo)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backends;
pub mod cartography;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalharness;
pub mod manifest;
pub mod orchestrator;
pub mod prompts;
pub mod selection;
pub mod stm;
pub mod swa;

pub use config::{Mode, RunConfig};
pub use dataset::{LabelSchema, Sample, SyntheticDataset};
pub use error::{Error, Result};
pub use orchestrator::{run_fusegen, FuseGenReport, Orchestrator, SeedReport};
