use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One offending sample found while validating an imported manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub sample_id: String,
    pub problem: String,
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.sample_id, self.problem)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("manifest validation failed for {}: {}", ids(.0), join(.0))]
    Validation(Vec<ValidationIssue>),

    #[error("insufficient samples in subgroup {subgroup}: need {needed}, have {available} (short by {})", .needed - .available)]
    InsufficientSamples {
        subgroup: String,
        needed: usize,
        available: usize,
    },

    #[error("infeasible joint allocation for class {class}: {reason}; closest feasible allocation: {suggestion:?}")]
    InfeasibleJoint {
        class: u8,
        reason: String,
        suggestion: Vec<(String, usize)>,
    },

    #[error("training diverged at epoch {epoch} (loss {loss}); config: {config}")]
    Divergence {
        epoch: usize,
        loss: f64,
        config: String,
    },

    #[error("layer error: {0}")]
    Layer(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("input mismatch: {0}")]
    Mismatch(String),

    #[error("unknown item {0}")]
    UnknownItem(String),

    #[error("item {item_id} already judged")]
    AlreadyJudged {
        item_id: String,
        existing: Box<crate::annotation::VerdictEntry>,
    },

    #[error("unknown feature {feature:?} for attribute {attribute:?}")]
    UnknownFeature { attribute: String, feature: String },

    #[error("invalid verdict: {0}")]
    InvalidVerdict(String),

    #[error("{} item(s) not judged: {}", .0.len(), .0.join(", "))]
    Unjudged(Vec<String>),

    #[error("store conflict: {0}")]
    Store(String),

    #[error("config hash mismatch; changed keys: {}", .0.join(", "))]
    ConfigChanged(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

fn ids(issues: &[ValidationIssue]) -> String {
    let mut ids: Vec<&str> = issues.iter().map(|i| i.sample_id.as_str()).collect();
    ids.dedup();
    ids.join(", ")
}

fn join(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
