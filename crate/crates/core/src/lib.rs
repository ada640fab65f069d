//! Core algorithms for denoising autoencoders with lateral connections.
//!
//! This crate holds everything that is pure computation: model
//! specification and initialization, the forward pass for the three
//! decoder variants, reverse-mode gradients, the ADADELTA update,
//! PCA whitening, patch sampling and corruption, transformation-set
//! generation, and the post-training invariance/significance analysis.
//!
//! It is `no_std`-compatible (with `alloc`); all IO, file formats and
//! the CLI live in the companion `latdae` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod data;
pub mod eigen;
pub mod gradients;
pub mod network;
pub mod optimizer;
pub mod real;
pub mod rng;
pub mod trainer;
pub mod transform;
pub mod whiten;

pub use network::{ModelSpec, Params, Variant};
pub use real::{Dtype, Real};
