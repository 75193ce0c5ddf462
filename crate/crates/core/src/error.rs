use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CfpError> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Each variant maps onto one of the CLI exit classes through
/// [`CfpError::exit_code`] and has a stable machine-readable
/// [`CfpError::kind`].
#[derive(Debug, Error)]
pub enum CfpError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("channel mismatch in {op}: expected {expected}, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("conv2d: non-integral or empty output size for input {input}, kernel {kernel}, stride {stride}, padding {padding}")]
    NonIntegralOutput {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("{op}: {channels} channels are not divisible by {groups} groups")]
    Groups {
        op: &'static str,
        channels: usize,
        groups: usize,
    },
    #[error("non-finite value produced or consumed by {0}")]
    NonFinite(&'static str),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("codebook must hold at least one codeword")]
    EmptyCodebook,
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("pyramid level {0} is missing")]
    MissingLevel(usize),
    #[error("spatial size {shallow} is not a power-of-two multiple of {deep}")]
    SpatialRatio { shallow: usize, deep: usize },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownConfigKey(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CfpError {
    /// Stable snake_case identifier used in machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            CfpError::ShapeData { .. } => "shape_data",
            CfpError::InvalidShape(_) => "invalid_shape",
            CfpError::ShapeMismatch { .. } => "shape_mismatch",
            CfpError::ChannelMismatch { .. } => "channel_mismatch",
            CfpError::Rank { .. } => "rank",
            CfpError::NonIntegralOutput { .. } => "non_integral_output",
            CfpError::Groups { .. } => "groups",
            CfpError::NonFinite(_) => "non_finite",
            CfpError::Axis { .. } => "axis",
            CfpError::EmptyCodebook => "empty_codebook",
            CfpError::NonScalar(_) => "non_scalar",
            CfpError::InvalidArgument(_) => "invalid_argument",
            CfpError::MissingLevel(_) => "missing_level",
            CfpError::SpatialRatio { .. } => "spatial_ratio",
            CfpError::BadMagic(_) => "bad_magic",
            CfpError::Truncated { .. } => "truncated",
            CfpError::UnsupportedDtype(_) => "unsupported_dtype",
            CfpError::TrailingBytes(_) => "trailing_bytes",
            CfpError::Config { .. } => "config",
            CfpError::UnknownConfigKey(_) => "unknown_config_key",
            CfpError::MissingParam(_) => "missing_param",
            CfpError::GradCheckFailed(_) => "gradcheck_failed",
            CfpError::Io { .. } => "io",
        }
    }

    /// Process exit code: 1 usage, 2 I/O or format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CfpError::NonFinite(_) | CfpError::GradCheckFailed(_) => 3,
            CfpError::BadMagic(_)
            | CfpError::Truncated { .. }
            | CfpError::UnsupportedDtype(_)
            | CfpError::TrailingBytes(_)
            | CfpError::MissingParam(_)
            | CfpError::Io { .. } => 2,
            CfpError::Config { .. } | CfpError::UnknownConfigKey(_) | CfpError::InvalidArgument(_) => 1,
            // Shape and structure errors come from inputs the user supplied.
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CfpError::Io {
            path: path.into(),
            source,
        }
    }
}
