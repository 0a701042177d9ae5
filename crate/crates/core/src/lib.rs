//! Sparse latent color fields for 3D-native texturing.
//!
//! A colored surface point cloud is encoded into per-voxel latent codes on a sparse
//! grid by a point-voxel attention VAE; the codes decode into a continuous color
//! field that can be queried anywhere on the surface and baked into UV textures.
//! A geometry-conditioned rectified-flow model generates new latents.

pub mod bake;
pub mod cli;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod nnkit;
pub mod pipeline;
pub mod seed;
pub mod vae;
pub mod voxelgrid;

pub use error::{Error, Result};
