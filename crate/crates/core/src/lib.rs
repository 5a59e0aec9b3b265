//! Object-aware anchor-free Siamese tracking.
//!
//! The crate is `no_std` with `alloc`: every kernel, the reverse-mode graph,
//! label generation, the network, the losses, the tracker state machine and
//! the synthetic training/evaluation harness are pure computations. File
//! formats, configuration parsing and the command line live in the `ocean`
//! companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod align;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod gradsuite;
pub mod harness;
pub mod image;
pub mod labels;
pub mod loss;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod tracker;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
