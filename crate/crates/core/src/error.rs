use thiserror::Error;

use crate::ir::IrError;
use crate::tensor::Layout;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tensor layout {0:?} has no channel axis")]
    NoChannelAxis(Layout),

    #[error("invalid quantizer: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite activation produced by layer `{layer}`")]
    NonFinite { layer: String },

    #[error("calibration set empty")]
    EmptyCalibrationSet,

    #[error("batch_norm `{0}` has no foldable predecessor")]
    UnfoldableBatchNorm(String),

    #[error("missing quantization parameters for `{0}`")]
    MissingQuantSpec(String),

    #[error("missing statistics for `{0}`")]
    MissingStats(String),

    #[error("dataset has no labels")]
    MissingLabels,

    #[error("label count {labels} does not match sample count {samples}")]
    LabelMismatch { labels: usize, samples: usize },

    #[error(transparent)]
    Ir(#[from] IrError),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}
