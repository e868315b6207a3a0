//! Numerical laboratory for single-layer linear attention on Gaussian
//! linear-regression tasks.
//!
//! The crate exposes:
//! - closed-form test errors and optimal parameters ([`theory`]),
//! - the attention forward map and its block-structured parameters
//!   ([`attention`]),
//! - Monte Carlo oracles that estimate the same quantities by simulation
//!   ([`montecarlo`]),
//! - gradient-descent training under several parameter-masking regimes
//!   ([`trainer`]),
//! - deterministic task/prompt sampling ([`taskgen`]) on a small dense
//!   linear-algebra core ([`linalg`]),
//! - and a command-line interface ([`cli`]) that reproduces the reference
//!   figures and table at desk scale.

pub mod attention;
pub mod cli;
pub mod linalg;
pub mod montecarlo;
pub mod taskgen;
pub mod theory;
pub mod trainer;
