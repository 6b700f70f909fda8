//! Exit-code classification: 1 usage or configuration, 2 data, 3 numeric.

use std::fmt::Display;

use dpreg::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numeric => 3,
        }
    }

    /// Class of an engine error raised while computing, not while loading.
    pub fn of(e: &Error) -> Self {
        match e.root() {
            Error::Config(_) | Error::InvalidArgument(_) => Kind::Usage,
            Error::NonFinite { .. } | Error::Numeric(_) | Error::Rejection { .. } => Kind::Numeric,
            _ => Kind::Data,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(msg: impl Display) -> Self {
        Self { kind: Kind::Usage, error: anyhow::anyhow!("{msg}") }
    }

    pub fn data(msg: impl Display) -> Self {
        Self { kind: Kind::Data, error: anyhow::anyhow!("{msg}") }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { kind: Kind::of(&e), error: e.into() }
    }
}

pub trait Classify<T> {
    /// Any failure here is the caller's input: exit 1.
    fn usage_ctx(self, what: impl Display) -> Result<T, Failure>;
    /// Any failure here is a file or dataset problem: exit 2.
    fn data_ctx(self, what: impl Display) -> Result<T, Failure>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn usage_ctx(self, what: impl Display) -> Result<T, Failure> {
        self.map_err(|e| Failure { kind: Kind::Usage, error: e.into().context(what.to_string()) })
    }

    fn data_ctx(self, what: impl Display) -> Result<T, Failure> {
        self.map_err(|e| Failure { kind: Kind::Data, error: e.into().context(what.to_string()) })
    }
}
