//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("generator row {row} sums to {sum:.3e}, expected 0")]
    RowSumViolation { row: usize, sum: f64 },

    #[error("negative off-diagonal rate Q[{row}][{col}] = {value}")]
    NegativeRate { row: usize, col: usize, value: f64 },

    #[error("generator is reducible: state {state} does not communicate with state 0")]
    Reducible { state: usize },

    #[error("singular linear system while computing {context}")]
    SingularSystem { context: &'static str },

    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),

    #[error("Laplace rate must be positive, got {0}")]
    NonPositiveLambda(f64),

    #[error("non-finite value {value} evaluating '{expr}' at u = {u}")]
    NonFiniteValue { expr: String, u: f64, value: f64 },

    #[error("time series too short: need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("characteristic escaped the domain at u = {position:.6} (bounds [{lo:.6}, {hi:.6}])")]
    DomainEscape { position: f64, lo: f64, hi: f64 },

    #[error("solvability residual {residual:.3e} exceeds {tol:.1e} at order {order}")]
    SolvabilityViolation {
        order: usize,
        residual: f64,
        tol: f64,
    },

    #[error("initial-condition mismatch {defect:.3e} exceeds {tol:.1e} at order {order}")]
    ConsistencyViolation { order: usize, defect: f64, tol: f64 },

    #[error("first layer term has nonzero projection: |Pi w(0)| = {norm:.3e}")]
    ProjectionViolation { norm: f64 },

    #[error("layer tail beyond tau_max estimated at {estimate:.3e}, limit {limit:.1e}")]
    TailTruncationTooCoarse { estimate: f64, limit: f64 },

    #[error("non-finite source term in transport solve at u = {u}, t = {t}")]
    NonFiniteSource { u: f64, t: f64 },

    #[error("expansion order {requested} not available, computed up to {computed}")]
    OrderUnavailable { requested: usize, computed: usize },

    #[error("time step {dt:.3e} violates the CFL limit {limit:.3e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("incompatible grids: {0}")]
    GridMismatch(String),

    #[error("degenerate convergence fit: {0}")]
    DegenerateFit(String),

    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown function '{name}' at byte {offset}")]
    UnknownFunction { name: String, offset: usize },

    #[error("unknown variable '{name}' at byte {offset}")]
    UnknownVariable { name: String, offset: usize },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("config schema error: {0}")]
    ConfigSchema(String),

    #[error("config validation error in {field}: {message}")]
    ConfigValidation { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit-code class: 2 for configuration and input errors, 3 for
    /// numerical failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::RowSumViolation { .. }
            | Error::NegativeRate { .. }
            | Error::Reducible { .. }
            | Error::Syntax { .. }
            | Error::UnknownFunction { .. }
            | Error::UnknownVariable { .. }
            | Error::ConfigParse(_)
            | Error::ConfigSchema(_)
            | Error::ConfigValidation { .. }
            | Error::Io(_) => 2,
            _ => 3,
        }
    }
}
