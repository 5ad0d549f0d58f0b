//! Interspatial attention for articulated-body video generation, desk scale.
//!
//! Everything runs on CPU in `f32` with deterministic, seed-reproducible
//! numerics. The crate is organized bottom-up:
//!
//! - [`tensor`], [`kernels`], [`tape`]: dense tensors, numeric kernels, and
//!   reverse-mode autodiff;
//! - [`nn`], [`ckpt`]: parameter store, optimizer, layers, checkpoints;
//! - [`geometry`], [`body`], [`synth`]: cameras and ray embeddings, the
//!   articulated capsule body, and the procedural clip renderer;
//! - [`vae`]: the temporally causal video autoencoder;
//! - [`attn`], [`dit`], [`flow`]: attention blocks (including interspatial
//!   attention), the diffusion transformer, and flow-matching training and
//!   sampling;
//! - [`metrics`], [`config`], [`exp`]: evaluation metrics, run configuration,
//!   and end-to-end experiment drivers shared by the CLI and the test suite.

pub mod attn;
pub mod body;
pub mod ckpt;
pub mod config;
pub mod dit;
pub mod error;
pub mod exp;
pub mod flow;
pub mod geometry;
pub mod kernels;
pub mod nn;
pub mod parallel;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;
