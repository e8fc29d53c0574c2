//! Localization of abstract causal variables inside neural networks by
//! optimal transport over intervention effect signatures.
//!
//! The library builds effect signatures for abstract-model and neural-site
//! interchange interventions, fits entropic (or one-sided unbalanced)
//! transport couplings between them, calibrates the coupling rows into
//! executable intervention handles, and benchmarks the result against
//! learned-rotation subspace interventions on two desk-scale tasks:
//! hierarchical equality over an MLP and 4-bit ripple-carry addition over a
//! GRU cell.

pub mod banks;
pub mod backbones;
pub mod causal;
pub mod error;
pub mod interventions;
pub mod numerics;
pub mod pipeline;
pub mod signatures;
pub mod transport;

pub use error::{Error, Result};
