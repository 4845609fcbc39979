//! Empirical SRB measures for partially hyperbolic attractors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cocycle;
pub mod error;
pub mod manifolds;
pub mod normed_linalg;
pub mod par;
pub mod qmc;
pub mod srb;
pub mod system;
pub mod weakstar;

pub use error::{Error, Result};
