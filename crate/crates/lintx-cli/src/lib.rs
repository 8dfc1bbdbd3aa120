//! Shared pieces of the lintx command line front end: the failure/exit-code
//! contract and PPM image I/O. The heavy lifting lives in lintx-core; the
//! binary's orchestration stays in the binary.

use lintx_core::error::CoreError;

pub mod ppm;

/// Failure classes, one exit code each.
#[derive(Debug)]
pub enum Fail {
    /// Bad flags, config values, or flag combinations. Exit 2.
    Usage(String),
    /// A verification or training run reported failure. Exit 1.
    Check(String),
    /// Missing, malformed, or mismatched files and data. Exit 3.
    Io(String),
}

impl Fail {
    pub fn code(&self) -> i32 {
        match self {
            Fail::Check(_) => 1,
            Fail::Usage(_) => 2,
            Fail::Io(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Fail::Usage(m) | Fail::Check(m) | Fail::Io(m) => m,
        }
    }
}

impl From<CoreError> for Fail {
    fn from(e: CoreError) -> Fail {
        match e {
            CoreError::TrainingAborted { .. } => Fail::Check(e.to_string()),
            _ => Fail::Io(e.to_string()),
        }
    }
}
