//! Monte-Carlo estimation of Jacobian spectrum moments.

pub mod factor;
pub mod sample;
pub mod sweep;
pub mod verify;

pub use factor::{empirical_moments, JacobianFactor};
pub use sample::{sample_component, sample_jacobian};
pub use sweep::{addition_configs, multiplication_configs, run_sweep, SweepRanges, SweepSummary};
pub use verify::{
    verify, verify_addition, verify_multiplication, Band, Tolerances, Topology, TrialConfig, TrialRecord,
    VerificationReport,
};
