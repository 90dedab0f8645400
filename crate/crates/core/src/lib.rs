//! Unrolled proximal gradient reconstruction with normalizing-flow priors.
//!
//! The crate solves `y = A x + η` for denoising, inpainting and deblurring by
//! unrolling a proximal gradient iteration whose proximal step shrinks the
//! iterate in the latent space of a trainable invertible flow. Everything
//! here is pure computation on `f64` tensors and builds without `std`.
#![no_std]

extern crate alloc;

pub mod diff;
pub mod error;
pub mod flow;
pub mod numerics;
pub mod operators;
pub mod train;
pub mod unfold;

pub use error::{Error, Result};
