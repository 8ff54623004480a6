use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, unknown names, out-of-range parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Argument outside the operation's domain (times, levels, empty samples).
    #[error("domain error: {0}")]
    Domain(String),

    /// Scheme/problem combination that the stepping kernels do not support.
    #[error("unsupported scheme: {0}")]
    UnsupportedScheme(String),

    /// A tamed run produced more diverged paths than the harness tolerates.
    #[error("excessive divergence: {0}")]
    ExcessiveDivergence(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
