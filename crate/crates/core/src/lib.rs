//! Core of the `jtft` forecaster.
//!
//! A joint time-frequency Transformer for multivariate forecasting: each
//! channel is patched, a handful of learnable cosine frequencies summarize the
//! patch sequence, the most recent patches are kept verbatim, and the joint
//! sequence is encoded channel-independently before a low-rank router layer
//! mixes information across channels.
//!
//! The crate is `no_std` (it needs `alloc`) and contains no IO. It carries:
//!
//! * [`tensor`]: a small reverse-mode autodiff tape, Adam, and a
//!   finite-difference gradient checker;
//! * [`spectral`]: DCT/IDCT, the customized cosine transform with learnable
//!   frequencies, and the reconstruction study helpers;
//! * [`model`]: normalization, patching, the joint representation, the
//!   encoder, the low-rank attention layer and the prediction head.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod model;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor, Var, Tape, ParamId, ParamStore};
