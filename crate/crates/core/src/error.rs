use sfda_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SfdaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SfdaError> = std::result::Result<T, E>;

impl SfdaError {
    /// True for errors caused by bad input files rather than bad settings.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            SfdaError::Format { .. }
                | SfdaError::Manifest(_)
                | SfdaError::Io(_)
                | SfdaError::Tensor(TensorError::Format { .. })
                | SfdaError::Tensor(TensorError::Io(_))
        )
    }
}
