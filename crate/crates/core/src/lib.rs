//! Desensitized Kalman filtering for linear systems with uncertain
//! parameters.
//!
//! The crate provides:
//!
//! - [`model`]: parametric linear models and the two-state benchmark system.
//! - [`filter_discrete`]: the discrete recursion with conventional,
//!   analytical-gain (ADKF) and linear-solve (KSDKF) gains.
//! - [`filter_continuous`]: the continuous-time counterparts integrated by RK4.
//! - [`sensitivity_oracle`]: finite-difference oracles for sensitivities and
//!   cost gradients.
//! - [`montecarlo`]: the seeded uncertain-parameter Monte-Carlo experiment.
//! - [`export`]: CSV writers for experiment reports.
//! - [`verify`]: the self-check suite behind `desense-kf verify`.

pub mod error;
pub mod export;
pub mod filter_continuous;
pub mod filter_discrete;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod sensitivity_oracle;
pub mod verify;

pub use error::{Error, Result};
pub use filter_discrete::{FilterState, StepRecord, WeightingScheme};
pub use model::{make_benchmark, AffineModel, ParameterVector, ParametricModel};
pub use montecarlo::{ExperimentConfig, ExperimentReport, NamedScheme};
