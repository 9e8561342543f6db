use alloc::string::String;
use core::fmt;

/// Errors raised by the engine, the models and the data pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not agree.
    Dimension { op: &'static str, detail: String },
    /// A token, type or segment id is outside its table.
    Vocabulary { id: usize, size: usize },
    /// A named skill or domain is not declared.
    Lookup(String),
    /// A precondition of an operation was violated.
    Contract(String),
    /// A NaN or infinity showed up in a forward or backward pass.
    NonFinite(&'static str),
    /// Malformed textual input.
    Parse { line: usize, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Vocabulary { id, size } => {
                write!(f, "id {id} out of bounds for table of size {size}")
            }
            Error::Lookup(name) => write!(f, "unknown name `{name}`"),
            Error::Contract(msg) => write!(f, "contract violated: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Parse { line, detail } => write!(f, "parse error at line {line}: {detail}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
