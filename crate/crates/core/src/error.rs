use thiserror::Error;

pub type Result<T> = std::result::Result<T, KfsError>;

#[derive(Debug, Error)]
pub enum KfsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: denominator magnitude {value:e} below guard")]
    NumericGuard { op: &'static str, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: row {row}, column {col}: {msg}")]
    Cell {
        path: String,
        row: usize,
        col: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("scale {scale}: {source}")]
    AtScale {
        scale: usize,
        #[source]
        source: Box<KfsError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl KfsError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        KfsError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        KfsError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn at_scale(self, scale: usize) -> Self {
        KfsError::AtScale {
            scale,
            source: Box::new(self),
        }
    }
}
