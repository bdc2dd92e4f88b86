//! Residual gradient compression with adaptive per-bin selection, its
//! baselines, a byte-level wire format, a small deterministic network
//! engine and an in-process synchronous data-parallel simulator.

pub mod codec;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod sim;
pub mod wire;

pub use codec::{pack, unpack, BinConfig, CodecState, GradientVector, PackedLayer};
pub use error::{Error, Result};
pub use wire::{decode, effective_compression_rate, encode, EncodedLayer};
