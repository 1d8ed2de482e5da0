//! Std companion of `tyco-core`: run configs, registry and template files,
//! corpus and checkpoint formats, experiment drivers and the `tyco` CLI.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;
mod error;
pub mod experiment;
pub mod selftest;

pub use error::{Error, Result};
