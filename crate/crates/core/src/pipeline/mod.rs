//! End-to-end synthetic experiments: data, staged training, sampling,
//! evaluation and ablations.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod embedder;
pub mod model;

pub use commands::*;
pub use config::{ExperimentConfig, Stage, MAX_FRAMES};
pub use dataset::{gen_dataset, Item, Normalizer, SyntheticDataset};
pub use embedder::{KineticPrototypeEmbedder, RetrievalEmbedder};
pub use model::{Model, ModelKind, ModelMeta, TrainedModel};
