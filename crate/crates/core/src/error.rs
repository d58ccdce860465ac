use alloc::string::String;

/// Errors raised across the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid argument ({detail})")]
    Invalid { op: &'static str, detail: String },
    #[error("coordinate {value} out of range for a {bits}-bit grid")]
    CoordinateOutOfRange { value: u32, bits: u32 },
    #[error("{op}: sequence length {len} exceeds oracle limit {max}")]
    TooLong {
        op: &'static str,
        len: usize,
        max: usize,
    },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("allocation of {bytes} bytes failed")]
    OutOfMemory { bytes: usize },
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            detail: detail.into(),
        }
    }
}
