//! Numerical core of a back-projection video super-resolution stack.
//!
//! Everything here is pure computation over owned buffers: tensors and a
//! reverse-mode tape, the generator / discriminator / flow networks, the
//! training objectives, the evaluation metrics and protocol, and a
//! single-step trainer. File formats, dataset IO and the command line live
//! in the companion `vsr` crate.
//!
//! The crate builds without `std` (it needs `alloc`); the default `std`
//! feature only enables runtime SIMD dispatch in the matrix kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod dataio;
pub mod discriminator;
pub mod error;
pub mod flow;
pub mod frame;
pub mod generator;
pub mod graph;
mod linalg;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod resample;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use frame::{Frame, LrHrPair, VideoClip};
pub use tensor::Tensor;

/// Super-resolution factor used throughout the stack.
pub const SCALE: usize = 4;
