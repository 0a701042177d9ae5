//! Per-voxel latent codes and their binary format.
//!
//! ```text
//! magic    4 bytes "LATF"
//! version  u32 (1)
//! dim      u32 latent channels
//! voxels   SparseVoxelSet block (see voxelgrid)
//! mean     L x dim f64
//! logvar   L x dim f64
//! z        L x dim f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nnkit::{Reader, Scalar, Tensor};
use crate::voxelgrid::SparseVoxelSet;

pub const LATENT_MAGIC: &[u8; 4] = b"LATF";
pub const LATENT_VERSION: u32 = 1;
/// Log-variance assigned to codes that carry no uncertainty (generated or posterior-mean codes).
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Latent codes on the active voxels of a [`SparseVoxelSet`], row-major `[L, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentField {
    pub voxels: SparseVoxelSet,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
}

impl LatentField {
    pub fn new(voxels: SparseVoxelSet, dim: usize, mean: Vec<f64>, logvar: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        let n = voxels.len() * dim;
        if mean.len() != n || logvar.len() != n || z.len() != n {
            return Err(Error::Shape(format!(
                "latent arrays must have {} x {dim} values (mean {}, logvar {}, z {})",
                voxels.len(),
                mean.len(),
                logvar.len(),
                z.len()
            )));
        }
        Ok(Self { voxels, dim, mean, logvar, z })
    }

    /// Deterministic codes: `mean = z`, minimal log-variance.
    pub fn from_codes(voxels: SparseVoxelSet, dim: usize, z: Vec<f64>) -> Result<Self> {
        let logvar = vec![LOGVAR_MIN; z.len()];
        Self::new(voxels, dim, z.clone(), logvar, z)
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn resolution(&self) -> u32 {
        self.voxels.resolution()
    }

    pub fn row(&self, voxel: usize) -> &[f64] {
        &self.z[voxel * self.dim..(voxel + 1) * self.dim]
    }

    pub fn z_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.len(), self.dim], &self.z).expect("latent shape is consistent")
    }

    pub fn mean_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.len(), self.dim], &self.mean).expect("latent shape is consistent")
    }

    /// Same voxels with replacement codes.
    pub fn with_codes(&self, z: Vec<f64>) -> Result<Self> {
        Self::from_codes(self.voxels.clone(), self.dim, z)
    }

    /// Copy whose sampled codes are replaced by the posterior mean.
    pub fn mean_field(&self) -> Self {
        Self { z: self.mean.clone(), ..self.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LATENT_MAGIC);
        out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        self.voxels.write_into(&mut out);
        for arr in [&self.mean, &self.logvar, &self.z] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != LATENT_MAGIC {
            return Err(Error::Parse("not a latent field (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != LATENT_VERSION {
            return Err(Error::Parse(format!("unsupported latent field version {version}")));
        }
        let dim = r.u32()? as usize;
        let voxels = SparseVoxelSet::read_from(&mut r)?;
        let n = voxels.len() * dim;
        let mut read = || (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>();
        let mean = read()?;
        let logvar = read()?;
        let z = read()?;
        if r.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes after latent field".into()));
        }
        Self::new(voxels, dim, mean, logvar, z)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Decoded per-voxel corner lattices, `[L, 8 * channels]` with corner index `4x + 2y + z`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub values: Tensor<f64>,
}

impl FeatureGrid {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Features of `voxel` at corner `(dx, dy, dz)`.
    pub fn corner(&self, voxel: usize, dx: usize, dy: usize, dz: usize) -> &[f64] {
        let c = 4 * dx + 2 * dy + dz;
        &self.values.row(voxel)[c * self.channels..(c + 1) * self.channels]
    }
}
