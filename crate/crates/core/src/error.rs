use thiserror::Error;

/// Crate-wide error type. Numerical guards are errors, not panics: a caller
/// driving a parameter sweep must be able to skip or report a bad point.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("grid under-resolved: {0}")]
    UnderResolved(String),

    #[error("parameter out of validity regime: {0}")]
    Regime(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("empty or degenerate input: {0}")]
    Degenerate(String),

    #[error(
        "aliasing guard tripped: {fraction:.3e} of the power would wrap at the window edge \
         (guard {guard:.1e}); enlarge the grid extent or shorten the propagation step"
    )]
    AliasingGuard { fraction: f64, guard: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown scenario id `{0}`")]
    UnknownScenario(String),

    #[error("unsupported container format: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
