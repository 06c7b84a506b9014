//! Allocation-only building blocks for generating, verifying and evaluating
//! aligned pairs of SPARQL queries and natural-language questions.
//!
//! Everything here is pure: no file, network or clock access. The `qnl`
//! crate layers IO, providers and the command-line pipeline on top.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod metrics;
pub mod pairs;
pub mod prompt;
pub mod rewrite;
pub mod types;
pub mod verifier;

pub use types::{DescriptionEntry, DescriptionKind, ProvenanceStamp, TrainingPair};
