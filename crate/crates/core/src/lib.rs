//! Numerical thermodynamic formalism for hyperbolic meromorphic maps of
//! Bergweiler–Kotus class: transfer operators with the geometric potential,
//! topological pressure, conformal and Gibbs measures, and numerical checks of
//! the estimates behind them.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod cloud;
pub mod error;
pub mod fit;
pub mod measures;
pub mod model;
pub mod pressure;
pub mod verify;
pub mod xfer;

pub use cloud::{sample_julia, JuliaCloud, NearestIndex, SamplingPolicy};
pub use error::{Error, Result};
pub use measures::{AtomicMeasure, ConformalEstimate, ConformalStrategy, Provenance, TestFn};
pub use model::{BkMapDescriptor, MapFamily, MapValue, PotentialParams, PreimageBranch, Tangent};
pub use verify::{CheckReport, Verdict};
pub use xfer::{PreimageSystem, PreimageTree, TruncatedOperator, TruncationPolicy};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
