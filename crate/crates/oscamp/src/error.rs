//! Error type shared by all modules.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("config error at {path}:{line}: {msg}")]
    Config {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("expression error: {0}")]
    Expr(String),

    #[error("model validation failed: {0}")]
    Model(String),

    #[error("spectral error: {0}")]
    Spectral(String),

    #[error("beta not in hyperbolic region: {0}")]
    NotHyperbolic(String),

    #[error("glancing mode: normal group velocity {0:.3e} below tolerance")]
    Glancing(f64),

    #[error("not in WR configuration at beta: {0}")]
    NotWeaklyStable(String),

    #[error("profile calculus error: {0}")]
    Profiles(String),

    #[error("small divisor at mode {alpha:?}: |det| = {det:.3e} below floor {floor:.3e}")]
    SmallDivisor {
        alpha: Vec<i32>,
        det: f64,
        floor: f64,
    },

    #[error("amplitude solver error: {0}")]
    Amplitude(String),

    #[error("blow-up at t = {t}: {norm:.3e}")]
    BlowUp { t: f64, norm: f64 },

    #[error("corrector error: {0}")]
    Corrector(String),

    #[error("direct solver error: {0}")]
    Solver(String),

    #[error("boundary Newton failed to converge at node {node} (residual {residual:.3e})")]
    NewtonFailed { node: usize, residual: f64 },

    #[error("nash-moser error: {0}")]
    NashMoser(String),

    #[error("harness error: {0}")]
    Harness(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
