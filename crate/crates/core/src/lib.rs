//! Crowd navigation by interaction-aware trajectory optimization.
//!
//! The robot plans over a receding horizon with a cost that includes the
//! log-likelihood of the humans' natural (robot-free) motion under a
//! robot-conditioned multimodal prediction. Safety comes from a
//! Hamilton-Jacobi backward reachable tube computed offline on a 4-D grid.
//!
//! Module map:
//!
//! - [`dynamics`]: robot double integrator, human single integrator, rollouts.
//! - [`predictor`]: pluggable differentiable mixture predictor plus the
//!   reference analytic implementation.
//! - [`interaction`]: the interaction cost and its gradient.
//! - [`reachability`]: HJI grid solver, value queries, safe control constraint.
//! - [`planner`]: problem construction, projected-gradient / augmented
//!   Lagrangian solver, warm starts and attention.
//! - [`baselines`]: decoupled, MCTS and RRT* comparison planners.
//! - [`sim`]: seeded episodes, traces, metrics and benchmarks.
//! - [`scenario`]: the scenario file schema.

pub mod baselines;
pub mod dynamics;
pub mod error;
pub mod interaction;
pub mod planner;
pub mod predictor;
pub mod reachability;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};

/// 2-D vector used for positions, velocities and controls.
pub type Vec2 = nalgebra::Vector2<f64>;
/// 2x2 matrix used for covariances and Jacobian blocks.
pub type Mat2 = nalgebra::Matrix2<f64>;
