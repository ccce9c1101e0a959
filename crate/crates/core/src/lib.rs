//! Collaborative edge inference with deep ensembles.
//!
//! A set of edge devices share one trained encoder and vector quantizer.
//! The device that observes a sample broadcasts its quantized features to
//! whichever neighbors it can currently reach; each neighbor runs its own
//! compact decoder and replies with a class-probability vector, and the
//! inferring device aggregates the replies into one prediction.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, softmax/cross-entropy, seeded random streams.
//! - [`vq`]: the shared codebook, nearest-codeword quantization and VQ losses.
//! - [`models`]: MLP encoder/decoders, hand-written backprop, ensemble training.
//! - [`network`]: Bernoulli link states and link capacities per round.
//! - [`latency`]: per-link and per-round delay, the closed-form delay CDF and
//!   its Monte Carlo counterpart.
//! - [`protocol`]: one collaborative inference round (mean or weighted vote).
//! - [`harness`]: JSON configuration, sweeps, CSV output and the CLI.

pub mod error;
pub mod harness;
pub mod latency;
pub mod models;
pub mod network;
pub mod numerics;
pub mod protocol;
pub mod vq;

pub use error::{Error, Result};
