use std::fmt;

use thiserror::Error;

/// Which graph a forward-backward failure came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphRole {
    Numerator,
    Denominator,
    Decode,
    Unspecified,
}

impl fmt::Display for GraphRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            GraphRole::Numerator => "numerator",
            GraphRole::Denominator => "denominator",
            GraphRole::Decode => "decode",
            GraphRole::Unspecified => "unspecified",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// No complete path of the requested length exists. `frame` is the first
    /// frame index at which the set of live states became empty (equal to the
    /// frame count when states survive but none of them is final).
    #[error("no complete path through {graph} graph (forward set empty at frame {frame})")]
    NoPath { graph: GraphRole, frame: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate gap: WER_FT equals WER_Comb ({0})")]
    DegenerateGap(f64),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Re-tag a `NoPath` error with the role of the graph that produced it.
    pub fn with_role(self, role: GraphRole) -> Self {
        match self {
            Error::NoPath { frame, .. } => Error::NoPath { graph: role, frame },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
