use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{Checkpoint, LayerNorm, Linear, ParamStore, Scalar, Tape, Tensor, Var};
use crate::seed;
use crate::vae::attention::{WindowBlock, WindowLayouts};
use crate::vae::center_tensor;
use crate::voxelgrid::VoxelKey;

pub const FLOW_CHECKPOINT_KIND: &str = "flow";

/// What a velocity network generates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowRole {
    /// Albedo latents conditioned on geometry latents.
    Albedo,
    /// Roughness/metallic latents conditioned on albedo latents.
    Material,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub window: u32,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal time embedding (even).
    pub time_dim: usize,
    /// Octaves of the sinusoidal voxel-center encoding (0 = raw centers only).
    pub pos_freqs: usize,
    /// Width of an optional extra per-voxel conditioning embedding (0 = unused).
    pub extra_dim: usize,
    /// Accept a second conditioning latent (geometry) through its own input map.
    pub geo_input: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            cond_dim: 8,
            hidden_dim: 64,
            blocks: 2,
            window: 8,
            mlp_ratio: 2,
            time_dim: 16,
            pos_freqs: 4,
            extra_dim: 0,
            geo_input: false,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.cond_dim == 0 || self.hidden_dim == 0 || self.window == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("flow dimensions and window must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("flow.time_dim must be a positive even number".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Arch {
    input: Linear,
    geo_in: Option<Linear>,
    blocks: Vec<WindowBlock>,
    norm: LayerNorm,
    out: Linear,
    skip: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Metadata {
    role: FlowRole,
    config: FlowConfig,
}

/// Sinusoidal embedding of `t ∈ [0,1]`: `sin(π 2ⁱ t), cos(π 2ⁱ t)` for `i < dim/2`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let w = std::f64::consts::PI * (1u64 << i.min(52)) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// Voxel centers scaled to `[-1, 1]`, followed by `sin(π 2ⁱ c), cos(π 2ⁱ c)` for each coordinate and `i < freqs`.
pub fn position_encoding(keys: &[VoxelKey], resolution: u32, freqs: usize) -> Tensor<f64> {
    let centers = center_tensor::<f64>(keys, resolution);
    let width = 3 + 6 * freqs;
    let mut data = Vec::with_capacity(keys.len() * width);
    for r in 0..keys.len() {
        let c = centers.row(r);
        data.extend_from_slice(c);
        for i in 0..freqs {
            let w = std::f64::consts::PI * (1u64 << i.min(52)) as f64;
            for &x in c {
                data.push((w * x).sin());
                data.push((w * x).cos());
            }
        }
    }
    Tensor::new(&[keys.len(), width], data).expect("encoding shape")
}

/// Windowed-attention velocity network `v(x_t; t, cond)` over sparse voxel latents.
#[derive(Clone, Debug)]
pub struct VelocityNet<T: Scalar> {
    pub config: FlowConfig,
    pub role: FlowRole,
    pub params: ParamStore<T>,
    arch: Arch,
}

/// Per-call conditioning inputs, aligned row-for-row with the latent state.
pub struct Conditioning<'a, T: Scalar> {
    pub cond: &'a Tensor<T>,
    pub geo: Option<&'a Tensor<T>>,
    pub extra: Option<&'a Tensor<T>>,
    pub keys: &'a [VoxelKey],
    pub resolution: u32,
}

impl<T: Scalar> VelocityNet<T> {
    pub fn new(config: FlowConfig, role: FlowRole, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seed::rng(seed, "flow-init", 0);
        let arch = Self::build(&config, &mut params, &mut rng);
        Ok(Self { config, role, params, arch })
    }

    fn build<R: Rng>(c: &FlowConfig, s: &mut ParamStore<T>, rng: &mut R) -> Arch {
        let din = c.latent_dim + c.cond_dim + c.time_dim + 3 + 6 * c.pos_freqs + c.extra_dim;
        let h = c.hidden_dim;
        Arch {
            input: Linear::new(s, "flow.in", din, h, rng),
            geo_in: c.geo_input.then(|| Linear::zeros(s, "flow.geo_in", c.latent_dim, h)),
            blocks: (0..c.blocks)
                .map(|b| WindowBlock::new(s, &format!("flow.block{b}"), h, c.mlp_ratio, b % 2 == 1, rng))
                .collect(),
            norm: LayerNorm::new(s, "flow.norm", h),
            out: Linear::new(s, "flow.out", h, c.latent_dim, rng),
            skip: Linear::without_bias(s, "flow.skip", c.latent_dim, c.latent_dim, rng),
        }
    }

    /// Copy repurposed to generate material latents conditioned on albedo latents.
    ///
    /// Existing weights are kept; with `geo_input` a zero-initialized geometry input map
    /// is added so the initial network is unchanged.
    pub fn for_material(&self, geo_input: bool) -> Result<Self> {
        let mut config = self.config.clone();
        if config.cond_dim != config.latent_dim {
            return Err(Error::Shape(format!(
                "albedo conditioning needs cond_dim == latent_dim (got {} and {})",
                config.cond_dim, config.latent_dim
            )));
        }
        config.geo_input = config.geo_input || geo_input;
        let mut net = Self::new(config, FlowRole::Material, 0)?;
        net.params.load_from(&self.params)?;
        Ok(net)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = Metadata { role: self.role, config: self.config.clone() };
        Checkpoint::new(FLOW_CHECKPOINT_KIND, serde_json::to_string(&meta).expect("metadata serializes"), &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != FLOW_CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a '{FLOW_CHECKPOINT_KIND}' checkpoint, got '{}'", ckpt.kind)));
        }
        let meta: Metadata =
            serde_json::from_str(&ckpt.metadata).map_err(|e| Error::Checkpoint(format!("bad flow metadata: {e}")))?;
        let mut net = Self::new(meta.config, meta.role, 0)?;
        let loaded = net.params.load_from(&ckpt.params.cast())?;
        if loaded != net.params.len() || ckpt.params.len() != net.params.len() {
            return Err(Error::Checkpoint("parameter set does not match the flow config".into()));
        }
        Ok(net)
    }

    /// Velocity for state `x` (`[L, latent_dim]`) at time `t`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, x: Var, t: f64, c: &Conditioning<'_, T>) -> Result<Var> {
        let cfg = &self.config;
        let l = c.keys.len();
        let xs = tape.value(x).shape().to_vec();
        if xs != [l, cfg.latent_dim] || c.cond.shape() != [l, cfg.cond_dim] {
            return Err(Error::Shape(format!(
                "flow input {xs:?} / cond {:?} do not match {l} voxels ({} / {} channels)",
                c.cond.shape(),
                cfg.latent_dim,
                cfg.cond_dim
            )));
        }
        let s = &self.params;
        let cond = tape.constant(c.cond.clone());
        let temb = Tensor::from_f64(&[1, cfg.time_dim], &time_embedding(t, cfg.time_dim))?;
        let temb = tape.constant(temb);
        let temb = tape.gather_rows(temb, vec![0; l].into())?;
        let centers = tape.constant(position_encoding(c.keys, c.resolution, cfg.pos_freqs).cast());
        let mut parts = vec![x, cond, temb, centers];
        if cfg.extra_dim > 0 {
            let extra = match c.extra {
                Some(e) if e.shape() == [l, cfg.extra_dim] => e.clone(),
                Some(e) => return Err(Error::Shape(format!("extra embedding {:?}, expected [{l}, {}]", e.shape(), cfg.extra_dim))),
                None => Tensor::zeros(&[l, cfg.extra_dim]),
            };
            parts.push(tape.constant(extra));
        }
        let input = tape.concat(&parts)?;
        let mut h = self.arch.input.forward(tape, s, input)?;
        if let (Some(geo_in), Some(geo)) = (&self.arch.geo_in, c.geo) {
            if geo.shape() != [l, cfg.latent_dim] {
                return Err(Error::Shape(format!("geometry latent {:?}, expected [{l}, {}]", geo.shape(), cfg.latent_dim)));
            }
            let g = tape.constant(geo.clone());
            let g = geo_in.forward(tape, s, g)?;
            h = tape.add(h, g)?;
        }
        if !self.arch.blocks.is_empty() {
            let layouts = WindowLayouts::new(c.keys, cfg.window)?;
            for b in &self.arch.blocks {
                h = b.forward(tape, s, h, &layouts)?;
            }
        }
        let h = self.arch.norm.forward(tape, s, h)?;
        let out = self.arch.out.forward(tape, s, h)?;
        let skip = self.arch.skip.forward(tape, s, x)?;
        tape.add(out, skip)
    }

    /// Inference-only velocity evaluation.
    pub fn velocity(&self, x: &Tensor<T>, t: f64, c: &Conditioning<'_, T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let v = self.forward_tape(&mut tape, xv, t, c)?;
        Ok(tape.value(v).clone())
    }
}
