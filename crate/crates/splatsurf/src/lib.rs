//! CPU pipeline for reconstructing surfaces of large scenes from posed
//! photographs, using flattened Gaussian kernels as the scene representation.
//!
//! The crate is organised as a stack:
//! - [`scene`]: cameras, images, projection.
//! - [`field`]: the anchored, level-of-detail kernel field and its decoder.
//! - [`render`]: differentiable forward rasterisation and the hand-written
//!   backward pass.
//! - [`loss`]: photometric, geometric and multi-view objectives.
//! - [`partition`]: camera-visibility based scene chunking for scale-out.
//! - [`train`]: Adam, the optimisation loop, finite-difference checking.
//! - [`mesh`]: TSDF fusion and marching-cubes extraction.
//! - [`io`]: on-disk formats (camera ingest, images, config, checkpoints).
//!
//! Everything is `f64` and deterministic: a fixed seed and fixed inputs give
//! bit-identical results regardless of worker count.

pub mod field;
pub mod io;
pub mod loss;
pub mod mesh;
pub mod metrics;
pub mod param;
pub mod partition;
pub mod render;
pub mod scene;
pub mod synth;
pub mod train;
