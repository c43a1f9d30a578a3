//! Error classes and their process exit codes.

use std::fmt;

use leafaug::Error;

/// 0 success, 1 internal error, 2 configuration or usage error, 3 data error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Internal = 1,
    Config = 2,
    Data = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        Failure {
            kind: ExitKind::Config,
            error: e.into(),
        }
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Failure {
            kind: ExitKind::Data,
            error: e.into(),
        }
    }

    pub fn internal(e: impl Into<anyhow::Error>) -> Self {
        Failure {
            kind: ExitKind::Internal,
            error: e.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }

    pub fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Self {
        Failure {
            kind: self.kind,
            error: self.error.context(msg),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Library errors are data errors unless they signal an optimizer failure.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Training(_) => Failure::internal(e),
            _ => Failure::data(e),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait ResultExt<T> {
    fn or_config(self) -> CmdResult<T>;
    fn or_internal(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn or_config(self) -> CmdResult<T> {
        self.map_err(Failure::config)
    }

    fn or_internal(self) -> CmdResult<T> {
        self.map_err(Failure::internal)
    }
}
