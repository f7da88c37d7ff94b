//! Data-driven invariant sets and reference governors.
//!
//! Trajectory data under constant references is lifted through a thin-plate
//! dictionary; a linear program over positive semidefinite basis matrices
//! yields a quadratic certificate whose unit sublevel set is positively
//! invariant. The union over references drives a reference governor.

pub mod baseline;
pub mod data;
pub mod domain;
pub mod error;
pub mod governor;
pub mod invariance;
pub mod lift;
pub mod lp;
pub mod plants;
pub mod presets;
pub mod synthesis;

pub use baseline::{compare_admissible_sets, maximal_output_admissible, ComparisonReport, MoasResult, Polytope};
pub use data::{estimate_equilibrium, extract_pairs, EquilibriumEstimate, SamplePairs, TrajectorySet};
pub use domain::BoxDomain;
pub use error::{Error, Result};
pub use governor::{closed_loop_simulate, govern, GovernorLog, Scenario};
pub use invariance::{validate_invariance, AdmissibleSet, InvarianceReport, PISet, ProbeStatus};
pub use lift::{ConstraintFn, Dictionary};
pub use plants::{Plant, PlantConfig};
pub use synthesis::{synthesize_ci, synthesize_pi_set, SynthesisConfig, SynthesisResult};
