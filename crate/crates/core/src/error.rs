use thiserror::Error;

/// Errors produced by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of a function.
    #[error("domain error in {func}: {detail}")]
    Domain { func: &'static str, detail: String },

    /// Root scanning did not find enough sign changes.
    #[error("failed to bracket {wanted} roots of j_{n}' on x in [0, {x_max}] (found {found})")]
    RootBracket {
        n: usize,
        wanted: usize,
        found: usize,
        x_max: f64,
    },

    /// Two independently computed quantities disagree.
    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    /// Invalid scenario or model configuration. `path` names the offending field.
    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Non-finite values or similar numerical breakdown.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn domain(func: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            func,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user input rather than numerical breakdown.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Domain { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
