//! Error type shared across the crate.
//!
//! Every error carries a short machine-parsable class name (see
//! [`Error::class`]) so the CLI can emit `error[CLASS]: message` lines
//! that scripts can grep for.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A required prior step (checkpoint, phase) is missing.
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    /// A file had the wrong magic, layout, or was truncated.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A dataset directory could not be interpreted.
    #[error("load error: {reason}{}", offenders_suffix(.offenders))]
    Load {
        reason: String,
        offenders: Vec<PathBuf>,
    },

    /// Config file problem: bad syntax, bad value, or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// Unknown ablation arm name.
    #[error("unknown ablation arm: {0}")]
    BadArm(String),

    /// Another process owns the checkpoint directory.
    #[error("checkpoint directory is locked: {0}")]
    Locked(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Single-word machine-parsable class used in CLI error lines.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "INVALID",
            Error::Prerequisite(_) => "PREREQ",
            Error::Format { .. } => "FORMAT",
            Error::Load { .. } => "LOAD",
            Error::Config(_) => "CONFIG",
            Error::BadArm(_) => "BADARM",
            Error::Locked(_) => "LOCKED",
            Error::Io { .. } => "IO",
            Error::Image(_) => "IO",
        }
    }
}

fn offenders_suffix(offenders: &[PathBuf]) -> String {
    if offenders.is_empty() {
        String::new()
    } else {
        let list: Vec<String> = offenders
            .iter()
            .map(|p| p.display().to_string())
            .collect();
        format!(" (offending entries: {})", list.join(", "))
    }
}
