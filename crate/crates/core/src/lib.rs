//! Core algorithms for adversarial-transferability experiments on
//! block-encrypted image classifiers.
//!
//! The crate is `no_std` (with `alloc`). Everything here is a pure function of
//! its inputs and seeds; file IO, the CLI and thread pools live in the
//! companion `aetransfer` crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod attack;
pub mod autodiff;
pub mod crypto;
mod gemm;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use tensor::Tensor;
