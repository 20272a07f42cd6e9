//! Federated learning over a spectrum-shared, fading uplink, with
//! multi-agent sub-band and power allocation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod channel;
pub mod env;
pub mod error;
pub mod fl;
pub mod neuro;
pub mod qmix;
pub mod rng;
pub mod runner;
pub mod theory;

pub use error::{Error, Result};
