use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("axis {axis} is out of range for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("degenerate interval [{a}, {b}]: lower bound must be below upper bound")]
    DegenerateInterval { a: f64, b: f64 },
    #[error("{got} samples are not enough for a degree-{degree} fit (need at least {need})")]
    InsufficientSamples { degree: usize, got: usize, need: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty batch")]
    EmptyBatch,
    #[error("min-max layer has never seen a training batch")]
    Uninitialized,
    #[error("backward cache does not belong to a {0} layer")]
    CacheMismatch(&'static str),

    #[error("invalid one-hot row {0}")]
    InvalidOneHot(usize),
    #[error("empty dataset")]
    EmptyDataset,

    #[error("layer {0} is not an activation layer")]
    IndexNotActivation(usize),
    #[error("min-max layer {0} does not follow a dense or conv2d layer")]
    UnfoldableTopology(usize),
    #[error("pooling layer {0} has no downstream dense or conv2d layer to absorb its scale")]
    NoDownstreamLayer(usize),
    #[error("network is not HE-compatible: {}", describe_offenders(.0))]
    NotHeCompatible(Vec<(usize, String)>),

    #[error("bad magic number 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn describe_offenders(layers: &[(usize, String)]) -> String {
    layers
        .iter()
        .map(|(i, kind)| format!("layer {i} ({kind})"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
