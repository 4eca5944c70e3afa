//! Identification of weakly nonlinear forced oscillators from a single
//! trajectory: harmonic envelopes, joint sparse regression on the
//! generalized-harmonic-balance equations, and frequency-response
//! prediction by harmonic-balance continuation.

pub mod continuation;
pub mod cli;
pub mod error;
pub mod io;
pub mod ghb;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pod;
pub mod signal;
pub mod sparse;

pub use error::{Error, Result};
