//! Core estimation and network-operation math for cooperative range-based
//! navigation.
//!
//! Everything here is generic over the scalar type (see [`Real`]); the
//! aliases at the crate root pin the common `f64` instantiations used by the
//! simulator and harness.

pub mod error;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod operation;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub use inference::UpdateDiagnostics;
pub use model::{LinearMotion, NodeId, NodeKind, STATE_DIM};
pub use operation::Activation;

/// Default double-precision instantiations.
pub type GaussianBelief = model::GaussianBelief<f64>;
pub type NodeState = model::NodeState<f64>;
pub type MotionModel = model::MotionModel<f64>;
pub type Erc = model::Erc<f64>;
pub type RangeMeasurement = model::RangeMeasurement<f64>;
pub type StateVector = model::StateVector<f64>;
pub type StateMatrix = model::StateMatrix<f64>;

pub type UtParams = inference::UtParams<f64>;
pub type SigmaPointSet = inference::SigmaPointSet<f64>;
pub type StackedGaussian = inference::StackedGaussian<f64>;
pub type MeasurementEntry = inference::MeasurementEntry<f64>;
pub type MeasurementBatch = inference::MeasurementBatch<f64>;
pub type LsOptions = inference::LsOptions<f64>;

pub type LinkInfo = operation::LinkInfo<f64>;
pub type AllocationProblem = operation::AllocationProblem<f64>;
pub type AllocationResult = operation::AllocationResult<f64>;
pub type ActivationInputs = operation::ActivationInputs<f64>;
pub type SolverOptions = operation::SolverOptions<f64>;
pub type Relaxation = operation::Relaxation<f64>;
pub type HtnaDecision = operation::HtnaDecision<f64>;

/// Single-precision instantiations, for embedded-class targets.
pub mod f32 {
    pub type GaussianBelief = crate::model::GaussianBelief<f32>;
    pub type MotionModel = crate::model::MotionModel<f32>;
    pub type UtParams = crate::inference::UtParams<f32>;
    pub type MeasurementBatch = crate::inference::MeasurementBatch<f32>;
    pub type AllocationProblem = crate::operation::AllocationProblem<f32>;
}
