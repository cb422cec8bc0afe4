use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Scenario file or schema problem, detected before any event runs.
    #[error("config error: {0}")]
    Config(String),
    #[error("ranging error: {0}")]
    Ranging(String),
    #[error("numeric failure in {context}: {source}")]
    Numeric {
        context: String,
        #[source]
        source: nln_core::Error,
    },
}

pub type SimResult<T> = std::result::Result<T, SimError>;

pub(crate) fn numeric(context: impl Into<String>) -> impl FnOnce(nln_core::Error) -> SimError {
    let context = context.into();
    move |source| SimError::Numeric { context, source }
}
