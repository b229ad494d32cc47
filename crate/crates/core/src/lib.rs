//! Speculative decoding lab: exact, grouped and lossy verification kernels,
//! decoding engines, synthetic Markov toy models and a statistics harness.

pub mod cluster;
pub mod engine;
pub mod error;
pub mod harness;
pub mod model;
pub mod pmf;
pub mod rng;
pub mod toy;
pub mod verify;

pub use error::{Error, Result};
pub use pmf::{Logits, Partition, Pmf, TokenId};
pub use rng::RngStream;
