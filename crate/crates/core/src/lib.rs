//! Typology-aware multilingual conditioning for speech-to-text translation.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithmic piece:
//! a small reverse-mode autodiff engine, the typology-informed language
//! encoder, FiLM conditioning with a dynamic frame gate, CTC, the hybrid speech
//! adapter, a toy decoder with low-rank adapters, the two-stage training loop,
//! prompt assembly, a synthetic corpus generator and text metrics.
//!
//! File formats, configuration parsing and the command line live in the
//! companion `tyco` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adapter;
pub mod array;
pub mod conditioning;
pub mod ctc;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod prompting;
pub mod rng;
pub mod synthdata;
pub mod typology;
pub mod vocab;

pub use array::Array;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use rng::SeededRng;
