use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{point_batch, Vae};
use crate::error::{Error, Result};
use crate::geometry::SurfaceSample;
use crate::nnkit::{Adam, Scalar, Tape, Tensor};
use crate::seed;
use crate::voxelgrid::{local_coords, voxelize, SparseVoxelSet};

/// Optimization settings for [`train_vae`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub resolution: u32,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Stop before `steps` once the loss stops improving.
    pub plateau: Option<Plateau>,
}

impl Default for VaeTrainOptions {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-4, resolution: 32, seed: 0, grad_clip: Some(1.0), plateau: None }
    }
}

/// Convergence rule on window-averaged losses.
///
/// Training stops after `patience` consecutive windows of `window` steps whose mean
/// loss fails to beat the best earlier window mean by a relative `min_improvement`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plateau {
    pub window: usize,
    pub patience: usize,
    pub min_improvement: f64,
}

impl Plateau {
    /// True once `losses` has plateaued under this rule.
    pub fn reached(&self, losses: &[f64]) -> bool {
        if self.window == 0 {
            return false;
        }
        let means: Vec<f64> =
            losses.chunks_exact(self.window).map(|w| w.iter().sum::<f64>() / self.window as f64).collect();
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for m in means {
            if m < best * (1.0 - self.min_improvement) {
                best = m;
                stale = 0;
            } else {
                stale += 1;
                best = best.min(m);
            }
        }
        stale >= self.patience.max(1)
    }
}

/// A training cloud with its voxelization and per-sample local coordinates.
pub struct PreparedCloud {
    pub samples: Vec<SurfaceSample>,
    pub voxels: SparseVoxelSet,
    voxel_of: Vec<usize>,
    local: Vec<[f64; 3]>,
}

impl PreparedCloud {
    pub fn new(samples: Vec<SurfaceSample>, resolution: u32) -> Result<Self> {
        let voxels = voxelize(&samples, resolution)?;
        let mut voxel_of = vec![0; samples.len()];
        let mut local = vec![[0.0; 3]; samples.len()];
        for v in 0..voxels.len() {
            let key = voxels.keys()[v];
            for &m in voxels.members(v) {
                voxel_of[m as usize] = v;
                local[m as usize] = local_coords(samples[m as usize].position, key, resolution)?;
            }
        }
        Ok(Self { samples, voxels, voxel_of, local })
    }
}

/// Standard normal value that is a pure function of `(seed, index)`.
fn hashed_normal(seed: u64, index: u64) -> f64 {
    let a = seed::mix(seed ^ seed::mix(index));
    let b = seed::mix(a);
    let u1 = ((a >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Color of sample `i` after seeded Gaussian augmentation, clamped to `[0,1]`.
pub fn augmented_color(c: [f64; 3], sigma: f64, noise_seed: u64, i: usize) -> [f64; 3] {
    if sigma == 0.0 {
        return c;
    }
    [0, 1, 2].map(|ch| (c[ch] + sigma * hashed_normal(noise_seed, (3 * i + ch) as u64)).clamp(0.0, 1.0))
}

/// One optimization step's loss on `cloud`; gradients are accumulated into `vae.params`.
fn step_loss<T: Scalar>(vae: &mut Vae<T>, cloud: &PreparedCloud, seed_base: u64, step: u64) -> Result<f64> {
    let cfg = vae.config.clone();
    let mut rng = seed::rng(seed_base, "vae-step", step);
    let noise_seed = seed::derive(seed_base, "color-noise", step);
    let colors = |i: usize| augmented_color(cloud.samples[i].color, cfg.noise_sigma, noise_seed, i);

    let (members, offsets) = cloud.voxels.capped_members(cfg.train_point_cap, &mut rng);
    let batch = point_batch(&cloud.samples, &cloud.voxels, &members, &offsets, colors)?;
    let n_query = cfg.query_points.min(cloud.samples.len());
    let query = rand::seq::index::sample(&mut rng, cloud.samples.len(), n_query).into_vec();

    let mut tape = Tape::<T>::new();
    let keys = cloud.voxels.keys();
    let r = cloud.voxels.resolution();
    let (mean, logvar) = vae.encode_tape(&mut tape, &batch, keys, r)?;
    let eps: Vec<f64> = (0..keys.len() * cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    let eps = tape.constant(Tensor::from_f64(&[keys.len(), cfg.latent_dim], &eps)?);
    let half = tape.scale(logvar, T::of(0.5));
    let std = tape.exp(half);
    let noise = tape.mul(std, eps)?;
    let z = tape.add(mean, noise)?;
    let grid = vae.decode_tape(&mut tape, z, keys, r)?;

    let coords: Vec<f64> = query.iter().flat_map(|&i| cloud.local[i]).collect();
    let coords = tape.constant(Tensor::from_f64(&[n_query, 3], &coords)?);
    let cells: Arc<[usize]> = query.iter().map(|&i| cloud.voxel_of[i]).collect();
    let rgb = vae.color_tape(&mut tape, grid, coords, cells)?;
    let target: Vec<f64> = query.iter().flat_map(|&i| colors(i)).collect();
    let target = tape.constant(Tensor::from_f64(&[n_query, 3], &target)?);
    let diff = tape.sub(rgb, target)?;
    let diff = tape.abs(diff);
    let recon = tape.mean(diff);

    let m2 = tape.square(mean);
    let ev = tape.exp(logvar);
    let kl = tape.add(m2, ev)?;
    let kl = tape.sub(kl, logvar)?;
    let kl = tape.add_scalar(kl, T::of(-1.0));
    let kl = tape.mean(kl);
    let kl = tape.scale(kl, T::of(0.5 * cfg.beta));
    let loss = tape.add(recon, kl)?;

    let value = tape.value(loss).data()[0].f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("VAE loss at step {step} is {value}")));
    }
    let grads = tape.backward(loss);
    vae.params.zero_grads();
    vae.params.accumulate(&tape, &grads);
    Ok(value)
}

/// Trains `vae` on `clouds` (cycled in order), calling `on_step(step, loss)` after each step.
///
/// Returns the per-step losses.
pub fn train_vae<T: Scalar>(
    vae: &mut Vae<T>,
    clouds: &[PreparedCloud],
    opts: &VaeTrainOptions,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one point cloud".into()));
    }
    let mut adam = Adam::new(opts.lr);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let cloud = &clouds[step % clouds.len()];
        let loss = step_loss(vae, cloud, opts.seed, step as u64)?;
        if let Some(clip) = opts.grad_clip {
            vae.params.clip_grad_norm(clip);
        }
        adam.step(&mut vae.params);
        if !vae.params.all_finite() {
            return Err(Error::NonFinite(format!("VAE parameters became non-finite at step {step}")));
        }
        losses.push(loss);
        on_step(step, loss);
        if let Some(rule) = &opts.plateau {
            if (step + 1) % rule.window.max(1) == 0 && rule.reached(&losses) {
                break;
            }
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashed_normal_has_unit_moments() {
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|i| hashed_normal(9, i)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn plateau_waits_for_patience() {
        let rule = Plateau { window: 2, patience: 2, min_improvement: 0.01 };
        assert!(!rule.reached(&[4.0, 4.0, 2.0, 2.0, 1.0, 1.0]));
        assert!(!rule.reached(&[4.0, 4.0, 2.0, 2.0, 2.0, 2.0]));
        assert!(rule.reached(&[4.0, 4.0, 2.0, 2.0, 2.0, 2.0, 1.999, 1.999]));
        assert!(!rule.reached(&[1.0]));
    }

    #[test]
    fn augmentation_stays_in_range() {
        for i in 0..1000 {
            let c = augmented_color([0.0, 1.0, 0.5], 0.5, 3, i);
            assert!(c.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        assert_eq!(augmented_color([0.2; 3], 0.0, 3, 7), [0.2; 3]);
    }
}
