use std::fmt;
use std::path::Path;

use anatsynth::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_GEOMETRY: i32 = 3;
pub const EXIT_CHANNELS: i32 = 4;
pub const EXIT_SINGULAR: i32 = 5;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self { code: EXIT_IO, message: format!("{}: {err}", path.display()) }
    }

    /// Prefixes the message with the file or step it concerns.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_)
        | Error::Json(_)
        | Error::BadMagic { .. }
        | Error::BadHeaderSize(_)
        | Error::UnsupportedDatatype(_)
        | Error::UnsupportedLayout { .. }
        | Error::TruncatedData { .. }
        | Error::NonPositivePixdim { .. } => EXIT_IO,
        Error::GeometryMismatch(_) => EXIT_GEOMETRY,
        Error::ChannelMismatch { .. } => EXIT_CHANNELS,
        Error::SingularSystem => EXIT_SINGULAR,
        Error::InvalidConfig(_) | Error::NonPositiveLambda(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self { code: exit_code(&e), message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
