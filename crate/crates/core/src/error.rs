use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration field violates its invariant.
    InvalidConfig(String),
    /// An argument is outside the domain of a formula.
    Domain(&'static str),
    /// Array lengths or dtypes do not line up.
    Shape(String),
    /// Prefetch depths must satisfy `nc >= cg >= gg >= 1`.
    InvalidDepths { nc: usize, cg: usize, gg: usize },
    /// An operator sequence with no operators.
    EmptyModel,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::InvalidDepths { nc, cg, gg } => {
                write!(f, "invalid prefetch depths ({nc},{cg},{gg}): need nc >= cg >= gg >= 1")
            }
            Error::EmptyModel => f.write_str("model has no operators"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
