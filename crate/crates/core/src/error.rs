use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("training loss became non-finite")]
    NonFiniteLoss,
    #[error("sample is not correctly classified by the model")]
    NotCorrectlyClassified,
    #[error("empty input")]
    EmptyInput,
    #[error("class {0} has no training points")]
    EmptyClass(usize),
    #[error("invalid bandwidth grid: {0}")]
    InvalidGrid(String),
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("bandwidth has not been fitted")]
    BandwidthNotFitted,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("feature {0} has zero variance")]
    DegenerateFeature(usize),
    #[error("missing sample set: {0}")]
    MissingSet(String),
    #[error("no correctly classified validation samples")]
    EmptyValidation,
    #[error("bad magic number in {path}: expected {expected:#010x}, got {got:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        got: u32,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("ragged or empty CSV at line {0}")]
    RaggedRows(usize),
    #[error("pixel value {value} out of [0,1] at line {line}")]
    OutOfRangePixel { value: f64, line: usize },
    #[error("requested subset of {requested} from dataset of {available}")]
    TooLarge { requested: usize, available: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("persistence error: {0}")]
    Persist(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
