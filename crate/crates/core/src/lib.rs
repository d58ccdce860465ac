//! Serialized point-cloud sequence modeling.
//!
//! Point clouds are sampled into key points, ordered along space-filling
//! curves, embedded as patch tokens and mixed by selective state-space
//! blocks. Everything here is allocation-only (`no_std` + `alloc`): file
//! formats, checkpoints, timing and the command line live in the companion
//! `pointssm` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

mod error;

pub mod data;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod serialization;
pub mod ssm;
pub mod training;

pub use crate::error::{Error, Result};
pub use crate::numerics::{GradTape, Tensor, Var};
