//! Locally-to-globally density-guided one-shot crowd counting.
//!
//! A single annotated support image from a fixed camera scene conditions a
//! density regressor on unseen query images from the same scene. The support
//! density features are summarized two ways: a handful of unit-norm density
//! prototypes fitted by EM on the hypersphere ([`mldl`]), whose cosine
//! similarity planes against the query features drive a local convolutional
//! fusion, and a pooled density token that conditions the fused map through
//! single-token cross-attention ([`guidance`]).
//!
//! The crate is `no_std` (with `alloc`). File formats, the command line and
//! report serialization live in the companion `lgdcount` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backbone;
pub mod config;
pub mod density;
pub mod episodes;
mod error;
pub mod eval;
pub mod guidance;
pub(crate) mod math;
pub mod mldl;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
