//! Conditional rectified flow over sparse latent fields: interpolant, objective,
//! Euler sampler, masked (RePaint-style) refinement and material fine-tuning.

mod net;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use net::{position_encoding, time_embedding, Conditioning, FlowConfig, FlowRole, VelocityNet, FLOW_CHECKPOINT_KIND};

use crate::error::{Error, Result};
use crate::geometry::SurfaceSample;
use crate::nnkit::{Adam, Scalar, Tape, Tensor};
use crate::seed;
use crate::vae::{LatentField, Vae};
use crate::voxelgrid::{voxelize, SparseVoxelSet, VoxelKey};

/// Default number of Euler steps.
pub const DEFAULT_STEPS: usize = 50;

/// `(1 − t)·x₀ + t·ε`, elementwise.
pub fn make_xt(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has {} values, noise has {}", x0.len(), eps.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    Ok(x0.iter().zip(eps).map(|(&a, &e)| (1.0 - t) * a + t * e).collect())
}

/// Mean over elements of `(v − (ε − x₀))²`.
pub fn velocity_loss(v: &[f64], x0: &[f64], eps: &[f64]) -> Result<f64> {
    if v.len() != x0.len() || v.len() != eps.len() {
        return Err(Error::Shape("velocity, x0 and noise lengths differ".into()));
    }
    if v.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = v.iter().zip(x0).zip(eps).map(|((&v, &a), &e)| (v - (e - a)).powi(2)).sum();
    if !s.is_finite() {
        return Err(Error::NonFinite("flow loss".into()));
    }
    Ok(s / v.len() as f64)
}

/// One training example for the flow objective on a fixed voxel set.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub x0: Tensor<f64>,
    pub eps: Tensor<f64>,
    pub t: f64,
    pub cond: Tensor<f64>,
    pub geo: Option<Tensor<f64>>,
    pub keys: Vec<VoxelKey>,
    pub resolution: u32,
}

impl FlowBatch {
    pub fn xt(&self) -> Result<Tensor<f64>> {
        Tensor::new(self.x0.shape(), make_xt(self.x0.data(), self.eps.data(), self.t)?)
    }

    fn validate(&self) -> Result<()> {
        let l = self.keys.len();
        if self.x0.shape() != self.eps.shape() || self.x0.rows() != l || self.cond.rows() != l {
            return Err(Error::Shape("flow batch tensors are not aligned with its voxel keys".into()));
        }
        Ok(())
    }
}

/// Flow objective `mean ‖v(x_t; t, cond) − (ε − x₀)‖²` for one batch.
pub fn flow_loss<T: Scalar>(net: &VelocityNet<T>, batch: &FlowBatch) -> Result<f64> {
    batch.validate()?;
    let cond = batch.cond.cast::<T>();
    let geo = batch.geo.as_ref().map(|g| g.cast::<T>());
    let c = Conditioning { cond: &cond, geo: geo.as_ref(), extra: None, keys: &batch.keys, resolution: batch.resolution };
    let v = net.velocity(&batch.xt()?.cast(), batch.t, &c)?;
    velocity_loss(&v.to_f64_vec(), batch.x0.data(), batch.eps.data())
}

/// A time-dependent velocity field integrated by the sampler.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor<f64>, t: f64) -> Result<Tensor<f64>>;
}

/// The exact velocity of straight paths ending at `x0`: `v(x, t) = (x − x0) / t`.
pub struct StraightLineField {
    pub x0: Tensor<f64>,
}

impl VelocityField for StraightLineField {
    fn velocity(&self, x: &Tensor<f64>, t: f64) -> Result<Tensor<f64>> {
        if t <= 0.0 {
            return Err(Error::Domain("straight-line velocity is undefined at t = 0".into()));
        }
        let data = x.data().iter().zip(self.x0.data()).map(|(&a, &b)| (a - b) / t).collect();
        Tensor::new(x.shape(), data)
    }
}

/// A velocity network bound to its conditioning.
pub struct NetField<'a, T: Scalar> {
    net: &'a VelocityNet<T>,
    cond: Tensor<T>,
    geo: Option<Tensor<T>>,
    extra: Option<Tensor<T>>,
    keys: &'a [VoxelKey],
    resolution: u32,
}

impl<'a, T: Scalar> NetField<'a, T> {
    /// Binds `net` to `cond` (and optionally a geometry latent on the same voxels).
    pub fn new(net: &'a VelocityNet<T>, cond: &'a LatentField, geo: Option<&LatentField>) -> Result<Self> {
        if let Some(g) = geo {
            if g.voxels.keys() != cond.voxels.keys() {
                return Err(Error::Shape("geometry latent is on different voxels than the condition".into()));
            }
        }
        Ok(Self {
            net,
            cond: cond.z_tensor(),
            geo: geo.map(|g| g.z_tensor()),
            extra: None,
            keys: cond.voxels.keys(),
            resolution: cond.resolution(),
        })
    }

    /// Attaches an extra per-voxel conditioning embedding.
    pub fn with_extra(mut self, extra: Tensor<f64>) -> Self {
        self.extra = Some(extra.cast());
        self
    }
}

impl<T: Scalar> VelocityField for NetField<'_, T> {
    fn velocity(&self, x: &Tensor<f64>, t: f64) -> Result<Tensor<f64>> {
        let c = Conditioning {
            cond: &self.cond,
            geo: self.geo.as_ref(),
            extra: self.extra.as_ref(),
            keys: self.keys,
            resolution: self.resolution,
        };
        Ok(self.net.velocity(&x.cast(), t, &c)?.cast())
    }
}

fn euler_update(x: &mut Tensor<f64>, v: &Tensor<f64>, dt: f64) -> Result<()> {
    if v.shape() != x.shape() {
        return Err(Error::Shape(format!("velocity {:?} for state {:?}", v.shape(), x.shape())));
    }
    for (a, &b) in x.data_mut().iter_mut().zip(v.data()) {
        *a -= dt * b;
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("sampler state".into()));
    }
    Ok(())
}

/// Integrates from `t = 1` to `t = 0` with `steps` uniform Euler steps: `x ← x − Δt·v(x, t)`.
pub fn euler_integrate(field: &dyn VelocityField, mut x: Tensor<f64>, steps: usize) -> Result<Tensor<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = field.velocity(&x, t)?;
        euler_update(&mut x, &v, dt)?;
    }
    Ok(x)
}

/// Seeded unit-normal `[rows, cols]` tensor from the named stream.
pub fn seeded_noise(seed_value: u64, tag: &str, index: u64, rows: usize, cols: usize) -> Tensor<f64> {
    let mut rng = seed::rng(seed_value, tag, index);
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(&[rows, cols], data).expect("noise shape")
}

/// Starting noise of a sampling trajectory; shared by [`sample`] and [`repaint_refine`].
pub fn initial_noise(seed_value: u64, rows: usize, cols: usize) -> Tensor<f64> {
    seeded_noise(seed_value, "flow-sample", 0, rows, cols)
}

/// Generates a latent on `cond`'s voxels by integrating `field` from seeded noise.
pub fn sample_field(field: &dyn VelocityField, cond: &LatentField, dim: usize, steps: usize, seed_value: u64) -> Result<LatentField> {
    let x = initial_noise(seed_value, cond.len(), dim);
    let x = euler_integrate(field, x, steps)?;
    LatentField::from_codes(cond.voxels.clone(), dim, x.into_data())
}

/// Generates a latent conditioned on `cond` (and `geo` for material nets with a geometry input).
pub fn sample<T: Scalar>(
    net: &VelocityNet<T>,
    cond: &LatentField,
    geo: Option<&LatentField>,
    steps: usize,
    seed_value: u64,
) -> Result<LatentField> {
    let field = NetField::new(net, cond, geo)?;
    sample_field(&field, cond, net.config.latent_dim, steps, seed_value)
}

/// Per-voxel regeneration flags (`true` = regenerate).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentMask(pub Vec<bool>);

impl LatentMask {
    pub fn all(len: usize, value: bool) -> Self {
        Self(vec![value; len])
    }

    /// Flags the voxels of `voxels` whose keys appear in `keys`; unknown keys are ignored.
    pub fn from_keys(voxels: &SparseVoxelSet, keys: &[VoxelKey]) -> Self {
        let mut m = vec![false; voxels.len()];
        for k in keys {
            if let Some(i) = voxels.find(*k) {
                m[i] = true;
            }
        }
        Self(m)
    }

    /// Flags voxels whose center satisfies `pred`.
    pub fn from_region(voxels: &SparseVoxelSet, pred: impl Fn([f64; 3]) -> bool) -> Self {
        Self(voxels.centers().into_iter().map(pred).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Masked sampling: masked rows follow the flow, unmasked rows are re-noised from `known`
/// to the next time level after every step and equal `known` at the end.
pub fn repaint_field(
    field: &dyn VelocityField,
    known: &LatentField,
    mask: &LatentMask,
    steps: usize,
    seed_value: u64,
) -> Result<LatentField> {
    if mask.len() != known.len() {
        return Err(Error::Shape(format!("mask has {} entries for {} voxels", mask.len(), known.len())));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    if mask.count() == 0 {
        return Ok(known.clone());
    }
    let d = known.dim;
    let mut x = initial_noise(seed_value, known.len(), d);
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let t_next = if i + 1 == steps { 0.0 } else { 1.0 - (i + 1) as f64 * dt };
        let v = field.velocity(&x, t)?;
        euler_update(&mut x, &v, dt)?;
        let eps = seeded_noise(seed_value, "repaint", i as u64, known.len(), d);
        for (r, &regen) in mask.0.iter().enumerate() {
            if !regen {
                let row = make_xt(known.row(r), eps.row(r), t_next)?;
                x.row_mut(r).copy_from_slice(&row);
            }
        }
    }
    for (r, &regen) in mask.0.iter().enumerate() {
        if !regen {
            x.row_mut(r).copy_from_slice(known.row(r));
        }
    }
    known.with_codes(x.into_data())
}

/// RePaint-style refinement of the masked voxels of `known`.
pub fn repaint_refine<T: Scalar>(
    net: &VelocityNet<T>,
    known: &LatentField,
    mask: &LatentMask,
    cond: &LatentField,
    steps: usize,
    seed_value: u64,
) -> Result<LatentField> {
    if cond.voxels.keys() != known.voxels.keys() {
        return Err(Error::Shape("condition and known latent are on different voxels".into()));
    }
    let field = NetField::new(net, cond, None)?;
    repaint_field(&field, known, mask, steps, seed_value)
}

/// A target latent with its conditioning on identical voxels.
#[derive(Clone, Debug)]
pub struct FlowExample {
    pub target: LatentField,
    pub cond: LatentField,
    pub geo: Option<LatentField>,
}

impl FlowExample {
    pub fn new(target: LatentField, cond: LatentField, geo: Option<LatentField>) -> Result<Self> {
        if target.voxels.keys() != cond.voxels.keys() || geo.as_ref().is_some_and(|g| g.voxels.keys() != cond.voxels.keys()) {
            return Err(Error::Shape("flow example latents must share voxel keys".into()));
        }
        Ok(Self { target, cond, geo })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Decay `lr` to zero along a half cosine over `steps`.
    pub cosine: bool,
}

impl Default for FlowTrainOptions {
    fn default() -> Self {
        Self { steps: 5000, lr: 1e-4, seed: 0, grad_clip: Some(1.0), cosine: false }
    }
}

impl FlowTrainOptions {
    /// Learning rate used at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine || self.steps == 0 {
            return self.lr;
        }
        let x = step as f64 / self.steps as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * x).cos())
    }
}

/// Draws the `(t, ε)` pair of training step `step` for `example`.
pub fn training_batch(example: &FlowExample, seed_value: u64, step: u64) -> Result<FlowBatch> {
    let mut rng = seed::rng(seed_value, "flow-step", step);
    let t: f64 = rng.gen();
    let (l, d) = (example.target.len(), example.target.dim);
    let eps = (0..l * d).map(|_| rng.sample(StandardNormal)).collect();
    Ok(FlowBatch {
        x0: example.target.z_tensor(),
        eps: Tensor::new(&[l, d], eps)?,
        t,
        cond: example.cond.z_tensor(),
        geo: example.geo.as_ref().map(|g| g.z_tensor()),
        keys: example.target.voxels.keys().to_vec(),
        resolution: example.target.resolution(),
    })
}

/// Optimizes the flow objective, cycling through `examples`; returns per-step losses.
pub fn train_flow<T: Scalar>(
    net: &mut VelocityNet<T>,
    examples: &[FlowExample],
    opts: &FlowTrainOptions,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("flow training needs at least one example".into()));
    }
    for ex in examples {
        if ex.target.dim != net.config.latent_dim || ex.cond.dim != net.config.cond_dim {
            return Err(Error::Shape(format!(
                "example channels ({}, cond {}) do not match the network ({}, cond {})",
                ex.target.dim, ex.cond.dim, net.config.latent_dim, net.config.cond_dim
            )));
        }
    }
    let mut adam = Adam::new(opts.lr);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        adam.lr = opts.lr_at(step);
        let batch = training_batch(&examples[step % examples.len()], opts.seed, step as u64)?;
        let cond = batch.cond.cast::<T>();
        let geo = batch.geo.as_ref().map(|g| g.cast::<T>());
        let c = Conditioning { cond: &cond, geo: geo.as_ref(), extra: None, keys: &batch.keys, resolution: batch.resolution };
        let mut tape = Tape::<T>::new();
        let x = tape.constant(batch.xt()?.cast());
        let v = net.forward_tape(&mut tape, x, batch.t, &c)?;
        let target: Vec<f64> = batch.eps.data().iter().zip(batch.x0.data()).map(|(&e, &a)| e - a).collect();
        let target = tape.constant(Tensor::from_f64(batch.x0.shape(), &target)?);
        let diff = tape.sub(v, target)?;
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let value = tape.value(loss).data()[0].f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("flow loss at step {step} is {value}")));
        }
        let grads = tape.backward(loss);
        net.params.zero_grads();
        net.params.accumulate(&tape, &grads);
        if let Some(clip) = opts.grad_clip {
            net.params.clip_grad_norm(clip);
        }
        adam.step(&mut net.params);
        losses.push(value);
        on_step(step, value);
    }
    Ok(losses)
}

/// Packs roughness and metallic into the three color slots `(roughness, metallic, 0)`.
pub fn material_color(roughness: f64, metallic: f64) -> [f64; 3] {
    [roughness.clamp(0.0, 1.0), metallic.clamp(0.0, 1.0), 0.0]
}

/// Replaces sample colors with packed material channels.
pub fn material_cloud(samples: &[SurfaceSample], material: impl Fn(&SurfaceSample) -> (f64, f64)) -> Vec<SurfaceSample> {
    samples
        .iter()
        .map(|s| {
            let (r, m) = material(s);
            SurfaceSample { color: material_color(r, m), ..*s }
        })
        .collect()
}

/// Fine-tunes an albedo network into a material network conditioned on albedo latents.
///
/// Each example's `target` is a material latent, `cond` the albedo latent and `geo`
/// the optional geometry latent (used when `geo_input` is set).
pub fn pbr_finetune<T: Scalar>(
    albedo_net: &VelocityNet<T>,
    examples: &[FlowExample],
    geo_input: bool,
    opts: &FlowTrainOptions,
    on_step: impl FnMut(usize, f64),
) -> Result<(VelocityNet<T>, Vec<f64>)> {
    let mut net = albedo_net.for_material(geo_input)?;
    if geo_input && examples.iter().any(|e| e.geo.is_none()) {
        return Err(Error::InvalidArgument("geometry-conditioned fine-tuning needs geometry latents".into()));
    }
    let losses = train_flow(&mut net, examples, opts, on_step)?;
    Ok((net, losses))
}

/// Result of completing a partially observed texture.
#[derive(Clone, Debug)]
pub struct Inpainted {
    pub latent: LatentField,
    /// Voxels with no visible member point.
    pub mask: LatentMask,
    /// Latent of the partial cloud before completion.
    pub encoded: LatentField,
}

/// Completes occluded regions of a projected partial texture.
///
/// Occluded samples are painted white and the cloud is encoded; voxels without any
/// visible member are regenerated with [`repaint_refine`] conditioned on `cond`.
#[allow(clippy::too_many_arguments)]
pub fn inpaint_from_projection<T: Scalar, U: Scalar>(
    vae: &Vae<U>,
    net: &VelocityNet<T>,
    samples: &[SurfaceSample],
    visible: &[bool],
    cond: &LatentField,
    resolution: u32,
    steps: usize,
    seed_value: u64,
) -> Result<Inpainted> {
    if visible.len() != samples.len() {
        return Err(Error::Shape(format!("{} visibility flags for {} samples", visible.len(), samples.len())));
    }
    let partial: Vec<SurfaceSample> = samples
        .iter()
        .zip(visible)
        .map(|(s, &v)| if v { *s } else { SurfaceSample { color: [1.0; 3], ..*s } })
        .collect();
    let voxels = voxelize(&partial, resolution)?;
    let encoded = vae.encode_voxelized(&partial, &voxels, seed_value, false)?.mean_field();
    let mask = occlusion_mask(&voxels, visible);
    if mask.count() == 0 {
        return Ok(Inpainted { latent: encoded.clone(), mask, encoded });
    }
    let latent = repaint_refine(net, &encoded, &mask, cond, steps, seed_value)?;
    Ok(Inpainted { latent, mask, encoded })
}

/// Voxels none of whose members are visible.
pub fn occlusion_mask(voxels: &SparseVoxelSet, visible: &[bool]) -> LatentMask {
    LatentMask((0..voxels.len()).map(|v| !voxels.members(v).iter().any(|&m| visible[m as usize])).collect())
}
