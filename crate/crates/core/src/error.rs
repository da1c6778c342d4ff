use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("division by zero")]
    DivisionByZero,

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("pruning ratio {0} outside [0, 1]")]
    InvalidRatio(f64),

    #[error("corrupt sparse activation: {0}")]
    CorruptSparse(String),

    #[error("pruning schedule has {got} ratios but {expected} prunable layers are adapted")]
    ScheduleLength { expected: usize, got: usize },

    #[error("layer {layer}: {reason}")]
    MissingRecord { layer: usize, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(
        "batch norm layer {layer} sees a single value per channel; batch statistics are degenerate, \
         use blended statistics (bn_blend < 1) instead"
    )]
    DegenerateBatchNorm { layer: usize },

    #[error("every layer has zero importance; no pruning schedule can be derived")]
    DegenerateImportance,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("method {method} cannot run on this model: {reason}")]
    MethodMismatch { method: String, reason: String },

    #[error("adaptation diverged at batch {batch}: non-finite loss")]
    Diverged { batch: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
