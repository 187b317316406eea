//! Two-stream video action recognition with heterogeneous encoders.
//!
//! The pipeline pairs a patch-embedding transformer over a representative RGB
//! frame with a lightweight convolutional encoder over a 20-channel stack of
//! Farneback optical flow fields. A learned projection aligns the two feature
//! spaces and one of five interchangeable fusion heads produces class scores.
//!
//! The crate is organised along the pipeline stages:
//!
//! - [`videoio`]: clip ingestion, uniform frame sampling, manifests
//! - [`flow`]: Farneback dense flow, canonical normalization, stacking, caching
//! - [`tensor`]: dense tensors with reverse-mode differentiation
//! - [`encoders`]: the transformer appearance encoder and the inverted-residual
//!   motion encoder
//! - [`fusion`]: the projection layer and the five fusion heads
//! - [`train`]: splits, augmentation, AdamW + cosine annealing, experiments
//! - [`metrics`]: accuracy, macro-F1, top-K, confusion matrices, reports
//! - [`synthgen`]: deterministic synthetic datasets with controllable cues
//! - [`cli`]: the `dualstream` command-line entry point

pub mod cli;
pub mod config;
pub mod encoders;
pub mod flow;
pub mod fusion;
pub mod imageops;
pub mod metrics;
pub mod model;
pub mod npy;
pub mod rng;
pub mod svg;
pub mod synthgen;
pub mod tensor;
pub mod train;
pub mod videoio;
