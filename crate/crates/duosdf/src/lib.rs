//! Reconstruction of two interacting objects as separate signed distance fields
//! from calibrated multi-view RGB images with per-object masks.
//!
//! The pipeline: a shared multi-resolution hash encoding feeds two SDF heads and
//! a colour network; an occlusion-aware volume renderer composites both objects
//! into per-object and scene images; training supervises all three against
//! masked ground truth while a penetration regulariser keeps the fields from
//! overlapping where neither is observed.
//!
//! Entry points live in the `examples/` directory (one per capability) and in
//! the thin `duosdf` binary. The library layers:
//!
//! - [`geometry`]: cameras, rays, images, spherical harmonics
//! - [`autodiff`]: reverse-mode tape over flat buffers, MLPs, Adam, checkpoints
//! - [`hashgrid`] / [`occupancy`]: multi-resolution hash encoding, occupancy grid
//! - [`fields`]: the shared-encoding dual-SDF scene model
//! - [`render`]: occupancy-guided marching and alpha compositing
//! - [`losses`]: colour, penetration and eikonal objectives
//! - [`trainer`]: the optimisation loop, ray sampling, sequences
//! - [`synth`] / [`scenepack`]: analytic test scenes and the on-disk format
//! - [`mesh`] / [`metrics`]: marching cubes, chamfer, IoU, PSNR/SSIM
//! - [`cli`]: the subcommand implementations used by the binary


pub mod autodiff;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod hashgrid;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod occupancy;
pub mod render;
pub mod scenepack;
pub mod synth;

pub use error::{Error, Result};
