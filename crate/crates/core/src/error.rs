use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("atomic structure error: {0}")]
    Structure(String),

    #[error("unknown state {0}")]
    UnknownState(String),

    /// Three or more states would be coupled by distinct drives at once,
    /// which the rate model cannot describe.
    #[error("lambda guard: {0}")]
    LambdaGuard(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no convergence after {cycles} cycles (error {error:.3e})")]
    NonConvergence { cycles: usize, error: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
