use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("axis {axis} out of range for dimension {dim}")]
    AxisOutOfRange { axis: usize, dim: usize },
    #[error("field has non-zero mean {0:e}")]
    NonZeroMean(f64),
    #[error("density positivity violated: min rho_tilde = {min} <= {floor}")]
    PositivityViolated { min: f64, floor: f64 },
    #[error("initial temperature is not positive (min {0})")]
    NonPositiveInitial(f64),
    #[error("temperature step failure at t = {t}: {reason}")]
    StepFailure { t: f64, reason: String },
    #[error("matrix is not trace-free (trace {0:e})")]
    NotTraceFree(f64),
    #[error("sup bound violated: |v| = {sup_v} >= c = {c}")]
    BoundViolated { sup_v: f64, c: f64 },
    #[error("localization needs {boxes} boxes, cap is {cap}")]
    EpsilonTooSmall { boxes: usize, cap: usize },
    #[error("no admissible amplitude: {0}")]
    NoAdmissibleAmplitude(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("step stalled: {0}")]
    StepStalled(String),
    #[error("velocity field is not solenoidal (max |div| = {0:e})")]
    NotSolenoidal(f64),
    #[error("infeasible energy profile: {0}")]
    InfeasibleProfile(String),
    #[error("staircase stalled at level {level}: {reason}")]
    StallAtLevel { level: usize, reason: String },
    #[error("admissibility failed at t = {t}, x index {index}; suggested K >= {suggested_k}")]
    AdmissibilityFailed { t: f64, index: usize, suggested_k: f64 },
    #[error("non-positive state (min rho {rho}, min theta {theta})")]
    NonPositiveState { rho: f64, theta: f64 },
    #[error("classical solution lost smoothness at t = {t} (tail fraction {tail:e})")]
    BlowupSuspected { t: f64, tail: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
