//! Differentiable neural-billboard avatar engine.
//!
//! Mesh-anchored textured planar surfels are composited into a screen-space
//! feature image by a tiled software rasterizer and decoded to RGBA by a
//! small convolutional network; every stage carries a hand-derived backward
//! pass so the whole pipeline trains end-to-end with Adam.

pub mod anchor;
pub mod billboard;
pub mod camera;
pub mod check;
pub mod error;
pub mod losses;
pub mod math;
pub mod optim;
pub mod mesh;
pub mod dataset;
pub mod decoder;
pub mod raster;
pub mod rng;
pub mod state;
pub mod spectral;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
