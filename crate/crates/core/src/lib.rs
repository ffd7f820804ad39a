//! Pseudo-spectral laboratory for the stochastic Boussinesq equations on the
//! two-torus with noise on four temperature modes.

pub mod brackets;
pub mod checkpoint;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod lagrangian;
pub mod linearization;
pub mod malliavin;
pub mod mat2;
pub mod par;
pub mod rng;
pub mod spectral;
pub mod stats;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
