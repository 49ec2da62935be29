//! Numerical diagnostics for the Feller-Dynkin property of diffusions with
//! Markovian switching.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify1d;
pub mod ctmc;
pub mod expr;
pub mod linalg;
pub mod lyapunov;
pub mod mc_verify;
pub mod model;
pub mod quadrature;
pub mod radial;
pub mod report;
pub mod rng;
pub mod sampling;
pub mod sde_sim;
pub mod verdict;
