//! Iterative recovery of corrupted training labels for a prompt-tuned
//! classifier, driven by TracIn gradient-similarity influence.
//!
//! The pipeline: a frozen hashed n-gram [`encoder`] embeds texts, a
//! prompt-head [`model`] is the only trainable part, [`tracin`] retrieves the
//! training examples most influential for misclassified validation examples,
//! and [`gbair`] relabels or removes the most frequently retrieved ones before
//! retraining. [`harness`] runs ablation grids over seeds.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gbair;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod output;
pub mod plot;
pub mod seeds;
pub mod tracin;

pub use data::{CorruptionRecord, DatasetSplit, Example, Label, SyntheticConfig};
pub use encoder::{EmbeddingVector, Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use gbair::{
    run_experiment, CheckpointSet, ExperimentConfig, Intervention, IterationReport, Method, QueryLabel, RunOutput,
    RunSummary, Stage,
};
pub use harness::{run_sweep, SweepAxes, SweepSpec, SweepSummary};
pub use model::{Checkpoint, PromptHeadParams, TrainConfig};
pub use tracin::{GradientVector, InfluenceRecord, Measure};
