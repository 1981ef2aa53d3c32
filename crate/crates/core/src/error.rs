//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel mismatch: input has {input} channels, weight expects {expected}")]
    ChannelMismatch { input: usize, expected: usize },

    #[error("empty spatial output: {h}x{w} input with effective kernel {eff_kh}x{eff_kw} under valid padding")]
    EmptySpatialOutput {
        h: usize,
        w: usize,
        eff_kh: usize,
        eff_kw: usize,
    },

    #[error("batch of size 0")]
    EmptyBatch,

    #[error("batch-norm eval mode before any running statistics exist")]
    UninitializedStats,

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,

    #[error("tensor reference {0} is not on this tape")]
    DetachedTensor(usize),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("NaN gradient for parameter `{name}`; optimizer step aborted")]
    NanGradient { name: String },

    #[error("NaN loss at epoch {epoch}, step {step}; training aborted")]
    NanLoss { epoch: usize, step: usize },

    #[error("spatial dims {h}x{w} not divisible by {by}")]
    SpatialNotDivisible { h: usize, w: usize, by: usize },

    #[error("expected a filter list of length {expected}, got {got}")]
    FilterCount { expected: usize, got: usize },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("too few samples to split: {n} < {min}")]
    TooFewSamples { n: usize, min: usize },

    #[error("missing mask for image stem `{stem}`")]
    MissingMask { stem: String },

    #[error("image/mask size mismatch for `{item}`: image {iw}x{ih}, mask {mw}x{mh}")]
    SampleSizeMismatch {
        item: String,
        iw: u32,
        ih: u32,
        mw: u32,
        mh: u32,
    },

    #[error("unsupported augmentation op `{0}`")]
    UnsupportedAugmentOp(String),

    #[error("ROC-AUC undefined: labels contain a single class")]
    UndefinedAuc,

    #[error("pixel count {pixels} exceeds exact dense-CRF cap {cap}")]
    PixelCapExceeded { pixels: usize, cap: usize },

    #[error("corrupt weight file: {0}")]
    CorruptWeights(String),

    #[error("weight shape mismatch for tensor `{name}`: file has {found:?}, model expects {expected:?}")]
    WeightShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unknown tensor `{0}` in weight file")]
    UnknownWeight(String),

    #[error("failed to read image {path}: {source}")]
    ImageRead {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
