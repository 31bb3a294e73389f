//! Subjective equilibria under beliefs of exogenous uncertainty for
//! linear-quadratic stochastic dynamic games.
//!
//! Every player optimizes against a belief that the common environment
//! variables are exogenous; at equilibrium that belief coincides with the
//! distribution the joint strategies actually induce. The pipeline is
//!
//! 1. [`model`]: primitive data and validation,
//! 2. [`synthesis`]: each player's optimal response gains,
//! 3. [`aggregate`] and [`fixed_point`]: the equilibrium environment means,
//! 4. [`estimator`]: the closed-loop Kalman filter,
//! 5. [`simulate`] and [`verify`]: Monte Carlo checks of both equilibrium
//!    conditions.

pub mod aggregate;
pub mod error;
pub mod estimator;
pub mod example;
pub mod fixed_point;
pub mod fixtures;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod scenario;
pub mod simulate;
pub mod strategy;
pub mod synthesis;
pub mod tolerances;
pub mod verify;

pub use error::{Assumption, Error, Result};
pub use model::{GameSpec, Horizon, MeanFieldSpec};
pub use tolerances::Tolerances;
