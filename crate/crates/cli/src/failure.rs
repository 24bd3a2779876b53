use std::fmt::Display;

/// An error and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub const EXIT_IO: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

pub type Result<T = ()> = std::result::Result<T, Failure>;

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn config(msg: impl Display) -> Self {
        Self::new(EXIT_CONFIG, anyhow::anyhow!("{msg}"))
    }

    pub fn numeric(msg: impl Display) -> Self {
        Self::new(EXIT_NUMERIC, anyhow::anyhow!("{msg}"))
    }
}

/// Attach an exit code to any displayable error.
pub trait Classify<T> {
    fn or_exit(self, code: u8) -> Result<T>;
    fn ctx_exit(self, code: u8, what: impl Display) -> Result<T>;
}

impl<T, E> Classify<T> for std::result::Result<T, E>
where
    E: std::error::Error + Send + Sync + 'static,
{
    fn or_exit(self, code: u8) -> Result<T> {
        self.map_err(|e| Failure::new(code, e))
    }

    fn ctx_exit(self, code: u8, what: impl Display) -> Result<T> {
        self.map_err(|e| Failure::new(code, anyhow::Error::new(e).context(what.to_string())))
    }
}
