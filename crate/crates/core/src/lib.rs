//! Stackable patch-level "brick" backbone for denoising diffusion models.
//!
//! Every brick consumes the full-resolution noisy image, the previous brick's
//! full-resolution estimate of the clean image and a normalized coordinate
//! field, splits them into non-overlapping `r x r` patches, and refines each
//! patch independently with a small DiT-style transformer. Bricks are stacked
//! (progressive growth, progressive refinement or U-shaped), and any subset of
//! them can be skipped at sampling time.
//!
//! The crate is `no_std` (with `alloc`); randomness is always supplied by the
//! caller and every operation is a pure function of its inputs.

#![no_std]

extern crate alloc;

pub mod brick;
pub mod configs;
pub mod error;
pub mod optim;
pub mod panorama;
pub mod patch;
pub mod real;
pub mod sampler;
pub mod schedule;
pub mod skip;
pub mod stack;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Image, Tensor};
