//! Block-wise linear MIMO-OFDM channel model and turbo message passing for
//! joint active-device detection and channel estimation in grant-free
//! random access.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activity;
pub mod channel;
pub mod denoiser;
pub mod em;
pub mod engine;
pub mod error;
pub mod harness;
pub mod linear;
pub mod metrics;
pub mod pilot;
pub mod rng;

pub use error::{Error, Result};
