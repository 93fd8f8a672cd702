//! Differentiable hybrid radiance-field/mesh rendering and score-distillation
//! driven pose optimization for a skinned humanoid interacting with an object.
//!
//! The crate is `no_std` (with `alloc`). File formats, the CLI and the
//! out-of-process guidance client live in the `hoi` companion crate. Enable the
//! `parallel` feature to spread per-pixel work over a rayon pool; results are
//! bit-identical with and without it.

#![no_std]

extern crate alloc;

pub mod convert;
pub mod demo;
pub mod error;
pub mod field;
pub mod geometry;
pub mod guidance;
pub mod image;
pub mod optim;
mod par;
pub mod pipeline;
pub mod regularize;
pub mod render;
pub mod rng;
pub mod skeleton;

pub use error::{Error, Result};
pub use nalgebra;

/// 3D point or direction in scene units.
pub type Vec3 = nalgebra::Vector3<f64>;
