use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::attention::{intra_voxel_attention, point_voxel_cross_attention, WindowBlock, WindowLayouts};
use super::latent::{FeatureGrid, LatentField, LOGVAR_MAX, LOGVAR_MIN};
use super::VaeConfig;
use crate::error::{Error, Result};
use crate::geometry::SurfaceSample;
use crate::nnkit::{Activation, Checkpoint, LayerNorm, Linear, Mlp, ParamStore, Scalar, Tape, Tensor, Var};
use crate::seed;
use crate::voxelgrid::{local_coords, voxelize, SparseVoxelSet, VoxelKey};

pub const VAE_CHECKPOINT_KIND: &str = "vae";
/// Width of the raw per-point input: local coords, normal, color.
pub const POINT_INPUT_DIM: usize = 9;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Arch {
    point_in: Linear,
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    self_norm: LayerNorm,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_norm: LayerNorm,
    voxel_in: Linear,
    encoder: Vec<WindowBlock>,
    encoder_norm: LayerNorm,
    mean_head: Linear,
    logvar_head: Linear,
    decoder_in: Linear,
    decoder: Vec<WindowBlock>,
    decoder_norm: LayerNorm,
    grid_mlp: Mlp,
    color_mlp: Mlp,
}

const VOXEL_QUERY: &str = "enc.voxel_query";

/// Point-voxel attention VAE producing sparse latent color fields.
#[derive(Clone, Debug)]
pub struct Vae<T: Scalar> {
    pub config: VaeConfig,
    pub params: ParamStore<T>,
    arch: Arch,
}

/// Rows of the encoder input, grouped by voxel.
pub(crate) struct PointBatch<T: Scalar> {
    pub features: Tensor<T>,
    pub offsets: Vec<usize>,
}

/// Builds encoder inputs for the chosen member points of each voxel.
///
/// `colors(i)` supplies the color of sample `i`, so callers can substitute
/// augmented or monochrome colors without copying the cloud.
pub(crate) fn point_batch<T: Scalar>(
    samples: &[SurfaceSample],
    voxels: &SparseVoxelSet,
    members: &[u32],
    offsets: &[usize],
    colors: impl Fn(usize) -> [f64; 3],
) -> Result<PointBatch<T>> {
    let r = voxels.resolution();
    let mut data = Vec::with_capacity(members.len() * POINT_INPUT_DIM);
    for v in 0..voxels.len() {
        let key = voxels.keys()[v];
        for &m in &members[offsets[v]..offsets[v + 1]] {
            let s = samples
                .get(m as usize)
                .ok_or_else(|| Error::Shape(format!("member {m} beyond {} samples", samples.len())))?;
            let u = local_coords(s.position, key, r)?;
            let c = colors(m as usize);
            for x in u {
                data.push(T::of(2.0 * x - 1.0));
            }
            for x in s.normal {
                data.push(T::of(x));
            }
            for x in c {
                data.push(T::of(2.0 * x - 1.0));
            }
        }
    }
    Ok(PointBatch { features: Tensor::new(&[members.len(), POINT_INPUT_DIM], data)?, offsets: offsets.to_vec() })
}

/// Voxel centers scaled to `[-1, 1]`.
pub(crate) fn center_tensor<T: Scalar>(keys: &[VoxelKey], resolution: u32) -> Tensor<T> {
    let data: Vec<f64> = keys.iter().flat_map(|k| k.center(resolution).map(|c| 2.0 * c)).collect();
    Tensor::from_f64(&[keys.len(), 3], &data).expect("center shape")
}

/// `z = μ + exp(½·logvar)·ε` with `ε` drawn from a stream derived from `seed`.
pub fn reparameterize(mean: &[f64], logvar: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed, "latent-noise", 0);
    mean.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let e: f64 = rng.sample(StandardNormal);
            m + (0.5 * lv).exp() * e
        })
        .collect()
}

/// Mean over latent dimensions of `KL(N(μ, e^logvar) ‖ N(0, 1))`.
pub fn kl_divergence(mean: &[f64], logvar: &[f64]) -> f64 {
    if mean.is_empty() {
        return 0.0;
    }
    let s: f64 = mean.iter().zip(logvar).map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - lv - 1.0)).sum();
    s / mean.len() as f64
}

/// Mean absolute color error plus `beta` times the mean KL term.
pub fn vae_loss(pred: &[[f64; 3]], target: &[[f64; 3]], mean: &[f64], logvar: &[f64], beta: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let l1 = if pred.is_empty() {
        0.0
    } else {
        let s: f64 = pred.iter().zip(target).flat_map(|(p, t)| (0..3).map(move |c| (p[c] - t[c]).abs())).sum();
        s / (3 * pred.len()) as f64
    };
    Ok(l1 + beta * kl_divergence(mean, logvar))
}

impl<T: Scalar> Vae<T> {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seed::rng(seed, "vae-init", 0);
        let arch = Self::build(&config, &mut params, &mut rng);
        Ok(Self { config, params, arch })
    }

    fn build(c: &VaeConfig, s: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Arch {
        let (dp, dv) = (c.point_dim, c.voxel_dim);
        let blocks = |s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, n: usize| {
            (0..n)
                .map(|b| WindowBlock::new(s, &format!("{prefix}.block{b}"), dv, c.mlp_ratio, b % 2 == 1, rng))
                .collect::<Vec<_>>()
        };
        let point_in = Linear::new(s, "enc.point_in", POINT_INPUT_DIM, dp, rng);
        let self_q = Linear::without_bias(s, "enc.self_q", dp, dp, rng);
        let self_k = Linear::without_bias(s, "enc.self_k", dp, dp, rng);
        let self_v = Linear::without_bias(s, "enc.self_v", dp, dp, rng);
        let self_norm = LayerNorm::new(s, "enc.self_norm", dp);
        s.init_uniform(VOXEL_QUERY, &[1, dp], 1.0, rng);
        let cross_q = Linear::without_bias(s, "enc.cross_q", dp, dp, rng);
        let cross_k = Linear::without_bias(s, "enc.cross_k", dp, dp, rng);
        let cross_v = Linear::without_bias(s, "enc.cross_v", dp, dp, rng);
        let cross_norm = LayerNorm::new(s, "enc.cross_norm", dp);
        let voxel_in = Linear::new(s, "enc.voxel_in", dp + 3, dv, rng);
        let encoder = blocks(s, rng, "enc", c.encoder_blocks);
        let encoder_norm = LayerNorm::new(s, "enc.norm", dv);
        let mean_head = Linear::new(s, "enc.mean", dv, c.latent_dim, rng);
        let logvar_head = Linear::new(s, "enc.logvar", dv, c.latent_dim, rng);
        if let Some(b) = s.get_mut("enc.logvar.b") {
            b.data_mut().fill(T::of(c.logvar_init));
        }
        let decoder_in = Linear::new(s, "dec.in", c.latent_dim + 3, dv, rng);
        let decoder = blocks(s, rng, "dec", c.decoder_blocks);
        let decoder_norm = LayerNorm::new(s, "dec.norm", dv);
        let grid_mlp = Mlp::new(s, "dec.grid", &[dv, dv, 8 * c.feature_dim], Activation::Gelu, rng);
        if c.zero_init_grid {
            grid_mlp.zero_last(s);
        }
        let color_mlp = Mlp::new(s, "dec.color", &[c.feature_dim, c.color_hidden, 3], Activation::Relu, rng);
        Arch {
            point_in,
            self_q,
            self_k,
            self_v,
            self_norm,
            cross_q,
            cross_k,
            cross_v,
            cross_norm,
            voxel_in,
            encoder,
            encoder_norm,
            mean_head,
            logvar_head,
            decoder_in,
            decoder,
            decoder_norm,
            grid_mlp,
            color_mlp,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        Checkpoint::new(VAE_CHECKPOINT_KIND, meta, &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != VAE_CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a '{VAE_CHECKPOINT_KIND}' checkpoint, got '{}'", ckpt.kind)));
        }
        let config: VaeConfig =
            serde_json::from_str(&ckpt.metadata).map_err(|e| Error::Checkpoint(format!("bad VAE metadata: {e}")))?;
        let mut vae = Self::new(config, 0)?;
        let loaded = vae.params.load_from(&ckpt.params.cast())?;
        if loaded != vae.params.len() || ckpt.params.len() != vae.params.len() {
            return Err(Error::Checkpoint("parameter set does not match the VAE config".into()));
        }
        Ok(vae)
    }

    /// Encoder forward pass; returns `(mean, clamped logvar)` rows per voxel.
    pub(crate) fn encode_tape(
        &self,
        tape: &mut Tape<T>,
        batch: &PointBatch<T>,
        keys: &[VoxelKey],
        resolution: u32,
    ) -> Result<(Var, Var)> {
        let a = &self.arch;
        let s = &self.params;
        let x = tape.constant(batch.features.clone());
        let h = a.point_in.forward(tape, s, x)?;
        let (wq, wk, wv) = (self.weight(tape, &a.self_q)?, self.weight(tape, &a.self_k)?, self.weight(tape, &a.self_v)?);
        let att = intra_voxel_attention(tape, h, wq, wk, wv, &batch.offsets)?;
        let h = tape.add(h, att)?;
        let h = a.self_norm.forward(tape, s, h)?;
        let query = tape.param(s, VOXEL_QUERY)?;
        let (wq, wk, wv) =
            (self.weight(tape, &a.cross_q)?, self.weight(tape, &a.cross_k)?, self.weight(tape, &a.cross_v)?);
        let pooled = point_voxel_cross_attention(tape, h, query, wq, wk, wv, &batch.offsets)?;
        let q_rows = tape.gather_rows(query, vec![0; keys.len()].into())?;
        let v = tape.add(q_rows, pooled)?;
        let v = a.cross_norm.forward(tape, s, v)?;
        let centers = tape.constant(center_tensor(keys, resolution));
        let v = tape.concat(&[v, centers])?;
        let mut u = a.voxel_in.forward(tape, s, v)?;
        let layouts = WindowLayouts::new(keys, self.config.window)?;
        for block in &a.encoder {
            u = block.forward(tape, s, u, &layouts)?;
        }
        let u = a.encoder_norm.forward(tape, s, u)?;
        let mean = a.mean_head.forward(tape, s, u)?;
        let logvar = a.logvar_head.forward(tape, s, u)?;
        let logvar = tape.clamp(logvar, T::of(LOGVAR_MIN), T::of(LOGVAR_MAX));
        Ok((mean, logvar))
    }

    fn weight(&self, tape: &mut Tape<T>, l: &Linear) -> Result<Var> {
        tape.param(&self.params, &format!("{}.w", l.name))
    }

    /// Latent decoder: `[L, latent_dim]` codes to `[L, 8 * feature_dim]` corner lattices.
    pub(crate) fn decode_tape(&self, tape: &mut Tape<T>, z: Var, keys: &[VoxelKey], resolution: u32) -> Result<Var> {
        let a = &self.arch;
        let s = &self.params;
        if tape.value(z).rows() != keys.len() || tape.value(z).cols() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent {:?} does not match {} voxels x {} channels",
                tape.value(z).shape(),
                keys.len(),
                self.config.latent_dim
            )));
        }
        let centers = tape.constant(center_tensor(keys, resolution));
        let x = tape.concat(&[z, centers])?;
        let mut u = a.decoder_in.forward(tape, s, x)?;
        if !a.decoder.is_empty() {
            let layouts = WindowLayouts::new(keys, self.config.window)?;
            for block in &a.decoder {
                u = block.forward(tape, s, u, &layouts)?;
            }
        }
        let u = a.decoder_norm.forward(tape, s, u)?;
        a.grid_mlp.forward(tape, s, u)
    }

    /// Color decoder: trilinear feature lookup, MLP, sigmoid.
    pub(crate) fn color_tape(&self, tape: &mut Tape<T>, grid: Var, coords: Var, cells: Arc<[usize]>) -> Result<Var> {
        let f = tape.trilinear(grid, coords, cells)?;
        let rgb = self.arch.color_mlp.forward(tape, &self.params, f)?;
        Ok(tape.sigmoid(rgb))
    }

    fn encode_mean_logvar(
        &self,
        samples: &[SurfaceSample],
        voxels: &SparseVoxelSet,
        seed: u64,
        monochrome: bool,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if voxels.is_empty() {
            return Err(Error::InvalidArgument("cannot encode a cloud with zero active voxels".into()));
        }
        let mut rng = seed::rng(seed, "members", 0);
        let (members, offsets) = voxels.capped_members(self.config.point_cap, &mut rng);
        let batch = if monochrome {
            point_batch(samples, voxels, &members, &offsets, |_| [1.0; 3])?
        } else {
            point_batch(samples, voxels, &members, &offsets, |i| samples[i].color)?
        };
        let mut tape = Tape::new();
        let (mean, logvar) = self.encode_tape(&mut tape, &batch, voxels.keys(), voxels.resolution())?;
        let mean = tape.value(mean).to_f64_vec();
        let logvar = tape.value(logvar).to_f64_vec();
        if !mean.iter().chain(&logvar).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("encoder produced non-finite latents".into()));
        }
        Ok((mean, logvar))
    }

    /// Encodes a cloud already voxelized into `voxels`, sampling `z` with `seed`.
    pub fn encode_voxelized(
        &self,
        samples: &[SurfaceSample],
        voxels: &SparseVoxelSet,
        seed: u64,
        monochrome: bool,
    ) -> Result<LatentField> {
        let (mean, logvar) = self.encode_mean_logvar(samples, voxels, seed, monochrome)?;
        let z = reparameterize(&mean, &logvar, seed);
        LatentField::new(voxels.clone(), self.config.latent_dim, mean, logvar, z)
    }

    /// Voxelizes at `resolution` and encodes; `monochrome` replaces every color with white.
    pub fn encode(&self, samples: &[SurfaceSample], resolution: u32, seed: u64, monochrome: bool) -> Result<LatentField> {
        let voxels = voxelize(samples, resolution)?;
        self.encode_voxelized(samples, &voxels, seed, monochrome)
    }

    /// Texture-free shape code: monochrome encoding with `z` set to the posterior mean.
    pub fn geometry_latent(&self, samples: &[SurfaceSample], resolution: u32) -> Result<LatentField> {
        let voxels = voxelize(samples, resolution)?;
        let (mean, logvar) = self.encode_mean_logvar(samples, &voxels, 0, true)?;
        LatentField::new(voxels, self.config.latent_dim, mean.clone(), logvar, mean)
    }

    pub fn decode(&self, latent: &LatentField) -> Result<FeatureGrid> {
        if latent.dim != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent has {} channels, decoder expects {}",
                latent.dim, self.config.latent_dim
            )));
        }
        let mut tape = Tape::new();
        let z = tape.constant(latent.z_tensor());
        let grid = self.decode_tape(&mut tape, z, latent.voxels.keys(), latent.resolution())?;
        let values = tape.value(grid).cast::<f64>();
        Ok(FeatureGrid { channels: self.config.feature_dim, values })
    }

    /// Queryable color field of a latent; decodes once.
    pub fn color_field<'a>(&'a self, latent: &'a LatentField) -> Result<ColorField<'a, T>> {
        let mut tape = Tape::new();
        let z = tape.constant(latent.z_tensor());
        let grid = self.decode_tape(&mut tape, z, latent.voxels.keys(), latent.resolution())?;
        let grid = tape.value(grid).clone();
        Ok(ColorField { vae: self, voxels: &latent.voxels, grid, snap_radius: 0.5 / latent.resolution() as f64 })
    }

    /// Color field over an explicit feature grid.
    pub fn color_field_from_grid<'a>(&'a self, voxels: &'a SparseVoxelSet, grid: &FeatureGrid) -> Result<ColorField<'a, T>> {
        if grid.len() != voxels.len() || grid.channels != self.config.feature_dim {
            return Err(Error::Shape("feature grid does not match voxels or decoder".into()));
        }
        Ok(ColorField {
            vae: self,
            voxels,
            grid: grid.values.cast(),
            snap_radius: 0.5 / voxels.resolution() as f64,
        })
    }
}

/// Continuous color function of a decoded latent.
pub struct ColorField<'a, T: Scalar> {
    vae: &'a Vae<T>,
    voxels: &'a SparseVoxelSet,
    grid: Tensor<T>,
    /// Points farther than this from every active voxel have no color.
    pub snap_radius: f64,
}

const QUERY_CHUNK: usize = 16384;

impl<'a, T: Scalar> ColorField<'a, T> {
    pub fn voxels(&self) -> &SparseVoxelSet {
        self.voxels
    }

    pub fn with_snap_radius(mut self, radius: f64) -> Self {
        self.snap_radius = radius;
        self
    }

    /// Colors at `points`; `None` where no active voxel lies within the snap radius.
    pub fn query(&self, points: &[[f64; 3]]) -> Vec<Option<[f64; 3]>> {
        let mut out = vec![None; points.len()];
        let located: Vec<(usize, usize, [f64; 3])> = points
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| self.voxels.locate(p, self.snap_radius).map(|l| (i, l.voxel, l.local)))
            .collect();
        for chunk in located.chunks(QUERY_CHUNK) {
            let mut tape = Tape::new();
            let grid = tape.constant(self.grid.clone());
            let coords: Vec<f64> = chunk.iter().flat_map(|c| c.2).collect();
            let coords = tape.constant(Tensor::from_f64(&[chunk.len(), 3], &coords).expect("coord shape"));
            let cells: Arc<[usize]> = chunk.iter().map(|c| c.1).collect();
            let rgb = self.vae.color_tape(&mut tape, grid, coords, cells).expect("shapes are consistent");
            let rgb = tape.value(rgb);
            for (r, c) in chunk.iter().enumerate() {
                let row = rgb.row(r);
                out[c.0] = Some([row[0].f64(), row[1].f64(), row[2].f64()]);
            }
        }
        out
    }

    /// Colors at `points`, failing if any point is beyond the snap radius.
    pub fn query_all(&self, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        self.query(points)
            .into_iter()
            .zip(points)
            .map(|(c, p)| c.ok_or_else(|| Error::Domain(format!("point {p:?} is outside every active voxel"))))
            .collect()
    }
}
