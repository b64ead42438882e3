//! Spectrum moments of network Jacobians: a component library, composition
//! rules for serial and parallel graphs, gain solvers and Monte-Carlo checks.
//!
//! Everything analytic is generic over [`Scalar`] (`f32` or `f64`). The
//! Monte-Carlo layer works in `f64` only.

// `!(x > 0)` is used deliberately so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod effective_kernel;
pub mod error;
pub mod flow;
pub mod gains;
pub mod graph;
pub mod mc;
pub mod moments;
pub mod rng;
pub mod scalar;
pub mod smn_cost;

pub use effective_kernel::{brute_force_kernel_oracle, effective_kernel_size, ConvGeometry};
pub use error::{Error, Result};
pub use graph::{
    analyze_graph, compose_parallel, compose_serial, AnalysisOptions, Block, CompositionResult, NetworkGraph,
    VarphiPolicy, Verdict,
};
pub use moments::{component_moments, structure_flags, ComponentSpec, InvarianceOrder, Moments, StructureFlags};
pub use scalar::Scalar;

pub type Moments64 = Moments<f64>;
pub type Moments32 = Moments<f32>;
pub type ComponentSpec64 = ComponentSpec<f64>;
pub type ComponentSpec32 = ComponentSpec<f32>;
pub type NetworkGraph64 = NetworkGraph<f64>;
pub type NetworkGraph32 = NetworkGraph<f32>;
