use thiserror::Error;

/// Errors produced by problem evaluation, integration, sweeps and the solver.
#[derive(Debug, Error)]
pub enum Error {
    /// An API contract was violated (dimension mismatch, bad argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A problem callback produced a non-finite value.
    #[error("evaluation error in block `{block}`: non-finite output")]
    Evaluation { block: String },

    /// Requested time lies outside the stored span of a trajectory or spline.
    #[error("time {t} outside stored span [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    /// Adaptive integration exceeded the step cap.
    #[error("integration step cap ({cap}) exceeded at t = {t}")]
    StepLimit { t: f64, cap: usize },

    /// Step size underflowed; the problem looks stiff or the RHS is singular.
    #[error("step size underflow at t = {t} (h = {h:.3e})")]
    StepUnderflow { t: f64, h: f64 },

    /// Backward sweep failed (blow-up or non-finite state).
    #[error("backward sweep failed: {0}")]
    Sweep(String),

    /// Forward pass failed to integrate.
    #[error("forward pass failed: {0}")]
    ForwardPass(String),

    /// Line/grid search found no acceptable update.
    #[error("no improving step found (smallest factor tried: {min_eps})")]
    SearchFailed { min_eps: f64 },

    /// Solver-level failure with diagnostics.
    #[error("solve failed: {0}")]
    Solve(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
