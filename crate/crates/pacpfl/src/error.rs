//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by how
//! the CLI maps them to exit codes: configuration/shape problems (exit 2),
//! numerical failures (exit 3), and I/O or malformed input files (exit 4).

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value; `path` is the config field path
    /// (e.g. `data.modes[1].weight`).
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Dimension or shape mismatch between runtime values;
    /// `context` names the offending layer/matrix.
    #[error("shape mismatch in {context}: {message}")]
    Shape { context: String, message: String },

    /// Numerical failure (Cholesky breakdown after jitter escalation,
    /// non-finite values). `particle` and `client` are attached by the
    /// layer that knows them.
    #[error("numerical failure{}{}: {message}", fmt_opt("particle", .particle), fmt_opt("client", .client))]
    Numerical {
        message: String,
        particle: Option<usize>,
        client: Option<usize>,
    },

    /// Violation of the federated message protocol (wrong message count,
    /// mismatched rounds or particle dims).
    #[error("protocol violation: {message}")]
    Protocol { message: String },

    /// Malformed data file; `row` is the 1-based data row (header excluded).
    #[error("parse error in {path} at row {row}, column `{column}`: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    /// Output already exists and no force flag was given.
    #[error("refusing to overwrite existing output `{path}` (pass --force to allow)")]
    AlreadyExists { path: PathBuf },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn fmt_opt(label: &str, v: &Option<usize>) -> String {
    match v {
        Some(i) => format!(" ({label} {i})"),
        None => String::new(),
    }
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }

    pub fn shape(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape { context: context.into(), message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical { message: message.into(), particle: None, client: None }
    }

    pub fn protocol(message: impl Into<String>) -> Self {
        Error::Protocol { message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Attach the particle index to a numerical failure (no-op otherwise).
    #[must_use]
    pub fn with_particle(mut self, index: usize) -> Self {
        if let Error::Numerical { particle, .. } = &mut self {
            *particle = Some(index);
        }
        self
    }

    /// Attach the client id to a numerical failure (no-op otherwise).
    #[must_use]
    pub fn with_client(mut self, id: usize) -> Self {
        if let Error::Numerical { client, .. } = &mut self {
            *client = Some(id);
        }
        self
    }

    /// Process exit code the CLI maps this error to.
    #[must_use]
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Shape { .. } => 2,
            Error::Numerical { .. } | Error::Protocol { .. } => 3,
            Error::Parse { .. } | Error::AlreadyExists { .. } | Error::Io { .. } => 4,
        }
    }
}
