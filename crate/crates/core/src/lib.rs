//! Backstepping boundary control of a (1+n+1) hyperbolic system: two
//! counterconvecting transport equations coupled to n zero-speed states.

// `!(x > 0.0)` is used on purpose so that NaN fails validation; index
// loops mirror the lattice formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod cli;
pub mod error;
pub mod exec;
pub mod kernels;
pub mod matops;
pub mod model;
pub mod simulator;
pub mod transforms;

pub use error::{Error, Result};
pub use exec::Exec;
