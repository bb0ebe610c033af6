//! Error types shared across the solver stack.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A momentum/position/time argument left its declared domain.
    #[error("{what} = {value} outside [{lo}, {hi}]")]
    DomainViolation {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// The Legendre infimum ran off the momentum grid.
    #[error("Legendre infimum escapes the momentum grid at v = {v}; Hamiltonian is not coercive there")]
    NonCoercive { v: f64 },

    #[error("unsupported feature: {0}")]
    Unsupported(&'static str),

    #[error("time ordering violated: need t > s, got t = {t}, s = {s}")]
    TimeOrder { t: f64, s: f64 },

    /// Explicit-scheme stability bound exceeded.
    #[error("CFL violation: dt = {dt} exceeds stable bound {dt_max}")]
    CflViolation { dt: f64, dt_max: f64 },

    /// Riccati drift blow-up detected before the horizon.
    #[error("drift field blew up at t = {t} (|b| crossed {cap})")]
    BlowUp { t: f64, cap: f64 },

    /// A model hypothesis needed by the algorithm is violated by the data.
    #[error("hypothesis violation: {0}")]
    Hypothesis(String),

    #[error("rate evaluation failed: {0}")]
    RateFailure(String),

    /// h-transform positivity floor undercut.
    #[error("h = {value} below positivity floor {floor}")]
    PositivityFloor { value: f64, floor: f64 },

    /// Series truncation tail estimate above tolerance.
    #[error("series tail estimate {estimate} above tolerance {tol}; increase n_max beyond {n_max}")]
    TruncationTail {
        estimate: f64,
        tol: f64,
        n_max: usize,
    },

    #[error("ODE integration failed: {0}")]
    OdeFailure(String),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
