use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph must have at least one vertex")]
    EmptyGraph,
    #[error("invalid edge ({i}, {j}): {reason}")]
    InvalidEdge { i: usize, j: usize, reason: String },
    #[error("unknown vertex {0}")]
    UnknownVertex(usize),
    #[error("vertex {0} already present")]
    DuplicateVertex(usize),
    #[error("graph is not strongly connected")]
    NotStronglyConnected,
    #[error("graph is not weight-balanced (max column-sum residual {residual:.3e})")]
    NotWeightBalanced { residual: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid generator {index}: {reason}")]
    InvalidGenerator { index: usize, reason: String },
    #[error("penalty weight epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("infeasible load {load}: capacity range is ({min}, {max})")]
    InfeasibleLoad { load: f64, min: f64, max: f64 },
    #[error("lambda iteration did not converge after {iterations} bisection steps (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("algebraic connectivity must be positive, got {0:.3e}")]
    NonPositiveConnectivity(f64),
    #[error("load-informed unit {0} is not active")]
    InactiveReference(usize),
    #[error("unit {0} has no surviving in-neighbour to receive its token")]
    NoSurvivingInNeighbor(usize),
    #[error("unit {0} is not active")]
    UnitNotActive(usize),
    #[error("unit {0} is already active")]
    UnitAlreadyActive(usize),
    #[error("invalid event schedule: {0}")]
    InvalidSchedule(String),
    #[error("conservation of 1'v violated: |1'v| = {drift:.3e} at t = {t}")]
    ConservationDrift { t: f64, drift: f64 },
    #[error("empty trajectory segment")]
    EmptySegment,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
