//! Hybrid geometric/semantic belief for object-level SLAM.
//!
//! Robot poses and object positions are estimated by a Gaussian factor-graph
//! solver. The discrete class assignment of all objects is tracked as a set of
//! explicit hypotheses whose weights are expectations over joint trajectory
//! samples. Hypotheses that are pruned away are accounted for by a Hölder-type
//! bound on their total mass, so the reported posterior carries a certificate
//! of how much probability it may be missing.

pub mod engine;
pub mod error;
pub mod experiments;
pub mod logmath;
pub mod oracle;
pub mod priors;
pub mod scenario;
pub mod se2;
pub mod semantic;
pub mod slam;

pub use engine::{HybridBelief, HybridConfig, Posterior, QueryMode, SamplePolicy};
pub use error::{Error, Result};
pub use priors::{ClassAssignment, PriorModel};
pub use se2::{bearing, wrap_angle, Pose2};
pub use semantic::{SemanticModelParams, SemanticObservation};
pub use slam::{draw_samples, FactorGraph, GeometricBelief, MotionModel, SolverConfig, TrajectorySample};
