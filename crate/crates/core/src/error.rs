//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, SpikeError>;

#[derive(Debug, thiserror::Error)]
pub enum SpikeError {
    #[error("geometry must have nonzero height and width, got {height}x{width}")]
    BadGeometry { height: usize, width: usize },

    #[error("packed data is {actual} bytes, expected {expected} ({num_steps} steps x {bytes_per_frame} bytes/frame)")]
    SizeMismatch {
        expected: usize,
        actual: usize,
        num_steps: usize,
        bytes_per_frame: usize,
    },

    #[error("frame has {actual} samples, geometry needs {expected}")]
    FrameSizeMismatch { expected: usize, actual: usize },

    #[error("image shapes differ: {a_height}x{a_width} vs {b_height}x{b_width}")]
    ShapeMismatch {
        a_height: usize,
        a_width: usize,
        b_height: usize,
        b_width: usize,
    },

    #[error("window [{start}, {start}+{length}) out of range for stream of {num_steps} steps")]
    WindowOutOfRange {
        start: usize,
        length: usize,
        num_steps: usize,
    },

    #[error("step {step} out of range for stream of {num_steps} steps")]
    StepOutOfRange { step: usize, num_steps: usize },

    #[error("{0}")]
    Domain(String),

    #[error("{}: size {size} is not a multiple of {bytes_per_frame} bytes/frame (remainder {remainder})", path.display())]
    CorruptFile {
        path: PathBuf,
        size: u64,
        bytes_per_frame: u64,
        remainder: u64,
    },

    #[error("{}: missing required key `{key}`", path.display())]
    MissingKey { path: PathBuf, key: String },

    #[error("{}: bad value `{value}` for key `{key}`: {reason}", path.display())]
    BadValue {
        path: PathBuf,
        key: String,
        value: String,
        reason: String,
    },

    #[error("{}: line {line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {message}", path.display())]
    ImageFormat { path: PathBuf, message: String },

    #[error("malformed block header: {0}")]
    MalformedHeader(String),

    #[error("frame pool misuse: {0}")]
    PoolMisuse(String),

    #[error("timed out waiting for the next frame piece")]
    Timeout,

    #[error("pipeline session is closed")]
    Closed,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl SpikeError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        SpikeError::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        SpikeError::Domain(msg.into())
    }
}
