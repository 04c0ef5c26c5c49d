//! Crate-wide error type.

use crate::study::Vessel;

/// Errors produced by loading, validation, modeling and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("duplicate study_id {0:?}")]
    DuplicateStudyId(String),

    #[error("unresolvable view path {path:?} for study {study_id:?}")]
    UnresolvableViewPath { study_id: String, path: String },

    #[error(
        "label inconsistency in study {study_id:?}: total {total} != rca {rca} + lca {lca} \
         (pass allow_label_mismatch to recompute the total)"
    )]
    LabelInconsistency {
        study_id: String,
        total: f64,
        rca: f64,
        lca: f64,
    },

    #[error("invalid image data at {path}: {reason}")]
    Image { path: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty view: cannot sample frames from a view with no frames")]
    EmptyView,

    #[error("severity {0} outside [0, 1]")]
    SeverityOutOfRange(f64),

    #[error("negative score {0} has no log transform")]
    NegativeScore(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no {vessel} views: cannot predict this vessel branch")]
    MissingVesselViews { vessel: Vessel },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
