//! Deep variational privacy funnel toolkit.
//!
//! Discriminative (DisPF) and generative (GenPF) privacy-funnel training, the
//! variational leakage bounds they optimize, a MINE mutual-information meter
//! and an exact discrete oracle for every identity and bound.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod infotheory;
pub mod mine;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
