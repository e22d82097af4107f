//! Dynamic spike-and-slab priors for time-varying sparse regression.

// `!(x > 0.0)` guards are kept on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod densities;
pub mod em;
pub mod experiments;
pub mod error;
pub mod penalty;
pub mod quadrature;
pub mod rng;
pub mod threshold;

pub use densities::DssParams;
pub use error::{DssError, Result};
