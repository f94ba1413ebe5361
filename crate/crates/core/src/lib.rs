//! Event-driven simulation of the Kac walk with hard-sphere collisions,
//! plus diagnostics for its empirical measure, empirical collision flow
//! and the associated entropy functionals.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod engine;
pub mod entropy;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod initial_data;
pub mod kernel;
pub mod observables;
pub mod par;
pub mod rng;
pub mod stats;

pub use error::{KacError, Result};
pub use geometry::{Configuration, Dim, Velocity};
pub use kernel::KernelSpec;
