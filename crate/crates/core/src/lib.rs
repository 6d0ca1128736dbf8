//! Syscall-trace malware classification.
//!
//! The pipeline runs trace files through [`ingest`] and [`tokenizer`] into
//! fixed-length [`tokenizer::TokenWindow`]s, classifies them with the small
//! transformer in [`model`] (dense, sliding-window or block-sparse attention),
//! trains it with [`trainer`], scores it with [`metrics`] and turns per-window
//! probabilities into device-level verdicts with [`decision`]. [`synthgen`]
//! produces labelled synthetic traces in the same on-disk layout.

pub mod class;
pub mod decision;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod real;
pub mod seed;
pub mod synthgen;
pub mod tokenizer;
pub mod trainer;

pub use class::{BehaviorClass, ProbabilityVector, NUM_CLASSES};
pub use real::Real;
