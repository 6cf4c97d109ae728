use std::fmt;

use star_core::Error as CoreError;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Data,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Runtime,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Config => EXIT_CONFIG,
            Kind::Data => EXIT_DATA,
            Kind::Runtime => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.kind {
            Kind::Config => "config error",
            Kind::Data => "data error",
            Kind::Runtime => "error",
        };
        write!(f, "{label}: {}", self.message)
    }
}

impl std::error::Error for CliError {}

/// Core errors raised while reading inputs: configuration problems keep
/// their kind, everything else is a data error.
pub fn input_error(e: CoreError) -> CliError {
    match e {
        CoreError::Config { .. } => CliError::config(e.to_string()),
        other => CliError::data(other.to_string()),
    }
}

/// Core errors raised while computing.
pub fn runtime_error(e: CoreError) -> CliError {
    match e {
        CoreError::Config { .. } => CliError::config(e.to_string()),
        CoreError::Data { .. } => CliError::data(e.to_string()),
        other => CliError::runtime(other.to_string()),
    }
}
