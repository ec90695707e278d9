//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T, E = JetError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum JetError {
    /// Invalid geometry, model or training configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Operand extents do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or infinity was produced. `layer` names the coupling layer when known.
    #[error("numeric error{}: {detail}", layer.map(|l| format!(" in coupling layer {l}")).unwrap_or_default())]
    Numeric {
        layer: Option<usize>,
        detail: String,
    },

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed dataset or checkpoint file.
    #[error("format error in {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    /// Checkpoint written by an incompatible format version.
    #[error("checkpoint version mismatch in {}: file has version {found}, this build reads version {expected}", path.display())]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    /// Dataset could not be located or is empty.
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl JetError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        JetError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        JetError::Config(detail.into())
    }

    pub(crate) fn numeric(layer: Option<usize>, detail: impl Into<String>) -> Self {
        JetError::Numeric {
            layer,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        JetError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        JetError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a layer index to a numeric error that lacks one.
    pub fn in_layer(self, index: usize) -> Self {
        match self {
            JetError::Numeric {
                layer: None,
                detail,
            } => JetError::Numeric {
                layer: Some(index),
                detail,
            },
            other => other,
        }
    }
}
