//! Rydberg-atom multifrequency microwave receiver: a steady-state Lindblad
//! forward model for the probe transmission, an FDM-2PSK codec, a from-scratch
//! CNN + Bi-LSTM decoder, and a master-equation fitting baseline to compare
//! against.

pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fit;
pub mod nn;
pub mod physics;
pub mod rng;

pub use error::{Error, Result};
