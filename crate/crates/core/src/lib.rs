//! Data-driven moving horizon estimation for unknown autonomous systems.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod behavioral;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod mhe;
pub mod numerics;
pub mod qp;
pub mod sdp;
pub mod stability;

pub use error::{Error, Result};
pub use numerics::{Matrix, Tolerance, Vector};
