//! Masked acoustic modeling for end-to-end speech translation.
//!
//! The pipeline runs from log-mel [`features`] through frame or span
//! [`masking`], a convolutional transformer [`model`] with translation,
//! transcription, CTC and reconstruction heads, the training
//! [`objectives`] and [`trainer`], to beam [`decoding`]. [`toydata`]
//! generates a synthetic corpus small enough to train on a CPU.

pub mod decoding;
pub mod error;
pub mod features;
pub mod manifest;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod render;
pub mod rng;
pub mod toydata;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
