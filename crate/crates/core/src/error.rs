//! Crate-wide error type.

/// Errors raised by the library, grouped by failure class so callers
/// (notably the CLI) can map them onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid inputs: out-of-range coordinates, degenerate geometry,
    /// inconsistent shapes, bad configuration values.
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerical failure, e.g. a covariance that is not positive definite
    /// after the whole jitter ladder.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A generator produced values it cannot continue from.
    #[error("simulation error: {0}")]
    Simulation(String),

    /// An optimizer could not evaluate its objective anywhere.
    #[error("optimization error: {0}")]
    Optimization(String),

    /// The call is valid in isolation but not in this state
    /// (missing latent snapshots, too few draws, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// MCMC abort: carries the sweep index and a JSON snapshot of the
    /// sampler state at the point of failure.
    #[error("mcmc aborted at sweep {sweep}: {source}")]
    Mcmc {
        sweep: usize,
        snapshot: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file; `line` is 1-based.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
