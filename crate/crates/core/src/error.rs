use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("inconsistent token length: expected {expected}, got {got}")]
    TokenLength { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("softmax row {row} has no finite entry")]
    AllMaskedRow { row: usize },

    #[error("diagonal masking needs at least two tokens, got {0}")]
    MaskedSingleton(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("parameter `{name}` has shape {found:?} but the model expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint has parameter `{0}` that the model does not define")]
    UnexpectedParam(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("missing path: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("cannot read image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("label file: {0}")]
    Labels(String),

    #[error("ROC needs both classes (positives: {positives}, negatives: {negatives})")]
    SingleClass { positives: usize, negatives: usize },

    #[error("degenerate split: {0}")]
    Split(String),

    #[error("non-finite loss {loss} at epoch {epoch}")]
    Divergence {
        epoch: usize,
        loss: f64,
        dump: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
