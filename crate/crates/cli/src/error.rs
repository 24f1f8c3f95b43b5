use std::fmt;

use unveil_core::Error;

/// Failure category, which fixes the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: msg.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind.code()
    }

    /// `error[<tag>]: <message>` on a single line.
    pub fn line(&self) -> String {
        let msg = self
            .message
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        format!("error[{}]: {msg}", self.kind.tag())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Config(_) | Error::Domain(_) => ErrorKind::Config,
            Error::NonFinite { .. } | Error::TrainAbort { .. } => ErrorKind::Numeric,
            Error::Shape(_)
            | Error::MissingFile(_)
            | Error::MalformedPose { .. }
            | Error::Manifest(_)
            | Error::ImageDecode { .. }
            | Error::UnsupportedFormat(_)
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::CheckpointShape(_)
            | Error::Unmatched(_)
            | Error::Io(_) => ErrorKind::Data,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}
