//! Deterministic simulator core for peer-to-peer collaborative fine-tuning
//! of small causal language models with low-rank adapters.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every algorithm of
//! the simulator: synthetic corpora and client partitioning, a tiny
//! transformer with analytic LoRA gradients, the trust-matrix strategies,
//! and the round protocol with its communication ledger. File formats, the
//! command line and thread pools live in the `trustgossip` companion crate.
//!
//! All arithmetic is `f64` and every random draw comes from a seeded
//! ChaCha stream, so a run is bit-reproducible given its seeds regardless of
//! how many workers the [`exec::Executor`] uses.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod error;
pub mod exec;
pub mod math;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod summary;
pub mod trust;

pub use error::{Error, Result};
