//! Concept-guided input perturbation for small neural networks.
//!
//! The crate trains compact models with a from-scratch reverse-mode
//! autodiff engine, attaches linear probes to intermediate activations, and
//! then optimizes an input-space perturbation until the probe reports a
//! requested concept value while a modality-specific distance keeps the
//! perturbation small. Three modalities are built in: additive tabular
//! offsets, autoencoder latent edits for images, and binary piece masks for
//! 6x6 chess boards.

pub mod adapters;
pub mod autodiff;
pub mod chess;
pub mod data;
pub mod error;
pub mod graph;
pub mod maximise;
pub mod nn;
pub mod pipelines;
pub mod probe;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
