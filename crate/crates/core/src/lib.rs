//! Online identification of the inertial parameters of an object grasped by
//! a serial manipulator, on a fixed or a free-floating base.
//!
//! - [`spatial`]: rigid-body algebra, pseudo-inertia, log-det divergence.
//! - [`multibody`]: kinematic-tree dynamics and base momentum.
//! - [`regressor`]: force and momentum regressors, identifiability.
//! - [`estimator`]: recursive least squares with log-det regularization.
//! - [`simulation`]: closed-loop excitation experiments and metrics.

pub mod estimator;
pub mod multibody;
pub mod regressor;
pub mod simulation;
pub mod spatial;
