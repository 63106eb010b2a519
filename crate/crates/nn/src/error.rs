use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward already ran on this tape; record a fresh forward pass")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step} (epoch {epoch}, timesteps {timesteps:?})")]
    NonFiniteLoss {
        loss: f64,
        step: u64,
        epoch: usize,
        timesteps: Vec<usize>,
    },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] c2v_core::Error),
}

impl NnError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        NnError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Bad user input (as opposed to an internal or I/O failure).
    pub fn is_validation(&self) -> bool {
        match self {
            NnError::Shape(_) | NnError::Config(_) | NnError::Checkpoint(_) => true,
            NnError::Core(e) => e.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, NnError>;
