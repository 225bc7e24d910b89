//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DernError>;

#[derive(Debug, Error)]
pub enum DernError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("unknown expert id {0}")]
    UnknownExpert(usize),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported format version: {0}")]
    UnsupportedVersion(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate cluster: {0}")]
    DegenerateCluster(String),

    #[error("layer {layer}{}: {source}", expert.map(|e| format!(", expert {e}")).unwrap_or_default())]
    InLayer {
        layer: usize,
        expert: Option<usize>,
        #[source]
        source: Box<DernError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl DernError {
    pub fn in_layer(self, layer: usize) -> Self {
        DernError::InLayer {
            layer,
            expert: None,
            source: Box::new(self),
        }
    }

    pub fn in_expert(self, layer: usize, expert: usize) -> Self {
        DernError::InLayer {
            layer,
            expert: Some(expert),
            source: Box::new(self),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DernError::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, with layer/expert context stripped.
    pub fn root(&self) -> &DernError {
        match self {
            DernError::InLayer { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the `dern` binary: 2 bad arguments,
    /// 3 malformed input file, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            DernError::MalformedHeader(_)
            | DernError::Truncated { .. }
            | DernError::ShapeMismatch(_)
            | DernError::UnsupportedVersion(_)
            | DernError::Json(_)
            | DernError::Csv(_)
            | DernError::Io { .. } => 3,
            DernError::Numerical(_) | DernError::DegenerateCluster(_) => 4,
            _ => 2,
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(DernError::Dimension { expected, actual })
    }
}
