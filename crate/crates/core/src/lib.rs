//! Continuous second-order gradient solver for optimal control problems
//! with bounded controls.
//!
//! The solver iterates a backward Riccati sweep around a stored nominal
//! trajectory, forms a linear feedback control update, and accepts updates
//! through an augmented-Lagrangian merit function. Trajectories and
//! sensitivity matrices are stored as piecewise-polynomial continuous
//! records, so the backward and forward stages each run on their own
//! adaptive mesh. Control bounds are enforced exactly through a smooth
//! slack transform, which lets bang-bang switching structure emerge
//! without any prior knowledge of it.

pub mod control;
pub mod dense;
pub mod error;
pub mod problem;
pub mod problems;
pub mod solver;
pub mod sweep;
pub mod update;

pub use control::{ControlSpline, SegmentKind, SlackTransform, SmoothingSchedule};
pub use dense::{DenseSegment, DenseTrajectory, Integrator};
pub use error::{Error, Result};
pub use problem::{DerivativeReport, HamiltonianDerivatives, ProblemDef};
pub use solver::{Solution, SolverConfig, SolverStatus};
pub use sweep::{FeedbackGains, SweepSolution};
pub use update::{MeritReport, UpdateSet};
