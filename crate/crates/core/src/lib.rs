//! End-to-end SYNTAX score estimation from multi-view angiographic video.
//!
//! The pipeline: a study is a set of X-ray video views of the right and left
//! coronary arteries. Each view is sampled to a fixed-length clip, embedded
//! with a 3D convolutional backbone, the per-view embeddings are fused by a
//! head network (mean / recurrent / attention), and a linear output maps the
//! fused vector to a log-score per vessel. The study total is the sum of the
//! two vessel scores. Training runs in three stages (backbone, head, joint
//! fine-tune) under k-fold cross-validation.
//!
//! Modules map to the pipeline pieces:
//! - [`study`]: domain types, manifest schema, on-disk layout, validation
//! - [`synth`]: deterministic synthetic study generator for desk-scale runs
//! - [`sampler`]: variable-length view -> fixed-length normalized clip
//! - [`model`]: backbones, fusion heads, vessel/study predictors, checkpoints
//! - [`trainer`]: staged training, cross-validation, threshold fitting
//! - [`metrics`]: regression, Bland-Altman, classification and agreement stats

pub mod error;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod study;
pub mod synth;
pub mod trainer;

pub use error::Error;
pub use study::{Labels, Manifest, Study, Vessel, View};

/// Crate result alias.
pub type Result<T> = std::result::Result<T, Error>;
