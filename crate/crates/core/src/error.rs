use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which agent response failed to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseKind {
    Occlusion,
    Boundary,
    Description,
    Combined,
}

impl fmt::Display for ResponseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResponseKind::Occlusion => "occlusion",
            ResponseKind::Boundary => "boundary",
            ResponseKind::Description => "description",
            ResponseKind::Combined => "combined",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        op: &'static str,
        expected: (u32, u32),
        actual: (u32, u32),
    },

    #[error("invalid expansion: {0}")]
    InvalidExpansion(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{kind} response: {message}")]
    Parse {
        kind: ResponseKind,
        message: String,
        raw: String,
    },

    #[error("no mock fixture for message digest {digest}")]
    MissingFixture { digest: String },

    #[error("unknown segmentation label {0:?}")]
    UnknownLabel(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },

    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },

    #[error("HTTP {status}: {excerpt}")]
    Status { status: u16, excerpt: String },

    #[error("protocol error: {message} (payload: {excerpt})")]
    Protocol { message: String, excerpt: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: (u32, u32), actual: (u32, u32)) -> Self {
        Error::DimensionMismatch {
            op,
            expected,
            actual,
        }
    }

    pub(crate) fn protocol(message: impl Into<String>, payload: &str) -> Self {
        Error::Protocol {
            message: message.into(),
            excerpt: excerpt(payload, 200),
        }
    }

    /// Whether a retry of the same request may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { .. } | Error::RateLimited { .. })
            || matches!(self, Error::Status { status, .. } if *status >= 500)
    }
}

pub(crate) fn excerpt(s: &str, max_chars: usize) -> String {
    let mut out: String = s.chars().take(max_chars).collect();
    if s.chars().count() > max_chars {
        out.push('…');
    }
    out
}
