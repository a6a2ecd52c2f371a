//! Feedback design for structured nonlinear epidemic models.
//!
//! The crate covers the whole estimate–observe–control loop for models of the form
//!
//! ```text
//! ẋ = A x + G f(H x, u),    y = C x
//! ```
//!
//! * [`model`]: the structured model class, the SIDHER instance and Lipschitz bounds.
//! * [`sim`]: adaptive integration, synthetic data generation, interpolation, forecasting.
//! * [`identifiability`]: numerical local identifiability/observability rank test.
//! * [`estimation`]: closed-form rate estimators and prediction-error fitting.
//! * [`sdp`] and [`observer`]: LMI observer synthesis, deployment and ISS diagnostics.
//! * [`ocp`]: single-shooting optimal control with path constraints.
//! * [`pipeline`]: configuration, artifact manifest and the stages behind the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimation;
pub mod identifiability;
pub mod linalg;
pub mod model;
pub mod observer;
pub mod ocp;
pub mod pipeline;
pub mod sdp;
pub mod sim;

pub use error::{Error, Result};
pub use model::{Domain, ParameterVector, StructuredModel};
pub use sim::{DataSet, NoiseSpec, Trajectory};
