//! Core engine for a graph-transformer operator over unstructured meshes.
//!
//! Everything in here is pure computation on `alloc` containers: dense
//! rank-2 tensors with a reverse-mode tape, mesh/graph structures and
//! samplers, the encoder / processor-block / decoder stack, an AdamW
//! training loop, and synthetic graph-PDE problems used as ground truth.
//! File formats and the command-line front end live in the companion
//! `gto-cli` crate, which is the only place that needs `std`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod block;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod mesh;
pub mod model;
pub mod partition;
pub mod real;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{GtoError, Result};
pub use real::Real;
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor;
