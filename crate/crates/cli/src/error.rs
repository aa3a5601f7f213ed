use std::fmt;

/// Exit status for usage and configuration problems.
pub const EXIT_CONFIG: i32 = 1;
/// Exit status for bad or missing input data.
pub const EXIT_DATA: i32 = 2;
/// Exit status for a failed verification.
pub const EXIT_VERIFY: i32 = 3;

/// An error with the process exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn config(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            source: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_DATA,
            source: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn verify(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_VERIFY,
            source: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn message(&self) -> String {
        format!("{:#}", self.source)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.source)
    }
}

impl From<revela_core::Error> for CliError {
    fn from(e: revela_core::Error) -> Self {
        let code = match e {
            revela_core::Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Self {
            code,
            source: e.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_DATA,
            source: e.into(),
        }
    }
}

/// Attaches a description of what was being done, keeping the exit status.
pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> Result<T, CliError>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn context(self, what: impl fmt::Display) -> Result<T, CliError> {
        self.map_err(|e| {
            let e = e.into();
            CliError {
                code: e.code,
                source: e.source.context(what.to_string()),
            }
        })
    }
}
