//! Core of the inpainting-immunization pipeline.
//!
//! Everything here is pure computation over `alloc` containers: a small
//! reverse-mode autodiff tape, the inpainting-denoiser contract and its toy
//! backend, mask/context algebra, timestep analysis, token-projective text
//! inversion, Monte Carlo centroid estimation, the digression PGD attack and
//! the evaluation sampler and metrics. File formats, image codecs and the CLI
//! live in the `digress` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attack;
pub mod autodiff;
pub mod backend;
pub mod centroid;
pub mod error;
pub mod eval;
pub mod inversion;
pub mod layout;
pub mod masking;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod timestep;

pub use error::{Error, Result};
pub use tensor::Tensor;
