use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bake::BakeOptions;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, DEFAULT_STEPS};
use crate::vae::VaeConfig;

/// Environment variable overriding `paths.cache`.
pub const CACHE_DIR_ENV: &str = "TEXFIELD_CACHE_DIR";

pub const SUPPORTED_RESOLUTIONS: [u32; 4] = [16, 32, 64, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub assets: PathBuf,
    pub cache: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            assets: "assets".into(),
            cache: "cache".into(),
            checkpoints: "checkpoints".into(),
            outputs: "outputs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Decay the learning rate to zero along a half cosine (flow training only).
    pub cosine: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-4, grad_clip: 1.0, cosine: false }
    }
}

impl TrainSection {
    pub fn clip(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }
}

/// Full pipeline configuration; every key can be set from a TOML file or `--set key=value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub resolution: u32,
    /// Points sampled per asset for VAE training and evaluation.
    pub vae_density: usize,
    /// Points sampled per asset when caching latents for flow training.
    pub flow_density: usize,
    pub seed: u64,
    pub workers: usize,
    /// Euler steps for generation and refinement.
    pub sample_steps: usize,
    /// Also condition material generation on the geometry latent.
    pub material_geo_input: bool,
    pub vae: VaeConfig,
    pub flow: FlowConfig,
    pub train_vae: TrainSection,
    pub train_flow: TrainSection,
    pub bake: BakeOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            resolution: 32,
            vae_density: 200_000,
            flow_density: 500_000,
            seed: 0,
            workers: 1,
            sample_steps: DEFAULT_STEPS,
            material_geo_input: true,
            vae: VaeConfig::desk(),
            flow: FlowConfig::default(),
            train_vae: TrainSection::default(),
            train_flow: TrainSection { steps: 5000, ..TrainSection::default() },
            bake: BakeOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::Config(format!(
                "resolution {} is not one of {SUPPORTED_RESOLUTIONS:?}",
                self.resolution
            )));
        }
        if self.vae_density == 0 || self.flow_density == 0 {
            return Err(Error::Config("sample densities must be positive".into()));
        }
        if self.flow_density < self.vae_density {
            return Err(Error::Config(format!(
                "flow_density ({}) must be at least vae_density ({})",
                self.flow_density, self.vae_density
            )));
        }
        if self.workers == 0 || self.sample_steps == 0 {
            return Err(Error::Config("workers and sample_steps must be positive".into()));
        }
        for (name, t) in [("train_vae", &self.train_vae), ("train_flow", &self.train_flow)] {
            if t.steps == 0 || !(t.lr > 0.0) || t.grad_clip < 0.0 {
                return Err(Error::Config(format!("{name}: steps and lr must be positive, grad_clip non-negative")));
            }
        }
        let b = &self.bake;
        if b.width == 0 || b.height == 0 || b.supersamples == 0 {
            return Err(Error::Config("bake size and supersamples must be positive".into()));
        }
        self.vae.validate()?;
        self.flow.validate()?;
        if self.flow.latent_dim != self.vae.latent_dim || self.flow.cond_dim != self.vae.latent_dim {
            return Err(Error::Config(format!(
                "flow.latent_dim and flow.cond_dim must equal vae.latent_dim ({})",
                self.vae.latent_dim
            )));
        }
        Ok(())
    }

    /// Parses a config document; keys it leaves out, including keys inside a partial
    /// section, keep their [`PipelineConfig::default`] values.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut root = toml::Value::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut root, toml::Value::Table(doc));
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies `key=value` overrides on dotted key paths; values parse as TOML, falling back to strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
            let value = parse_value(raw.trim());
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("'{key}' does not name a config table")))?;
                if !table.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config key '{key}'")));
                }
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table.get_mut(*part).expect("checked");
            }
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{e}")))
    }

    /// Cache root, honoring the environment override.
    pub fn cache_dir(&self) -> PathBuf {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.paths.cache.clone(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = PipelineConfig { resolution: 48, ..PipelineConfig::default() };
        assert!(c.validate().is_err());
        c.resolution = 64;
        c.vae_density = 0;
        assert!(c.validate().is_err());
        c.vae_density = 10;
        c.flow_density = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_follow_key_paths() {
        let c = PipelineConfig::default()
            .with_overrides(&["resolution=64", "vae.latent_dim=4", "flow.latent_dim = 4", "paths.outputs=out dir"])
            .unwrap();
        assert_eq!(c.resolution, 64);
        assert_eq!(c.vae.latent_dim, 4);
        assert_eq!(c.flow.latent_dim, 4);
        assert_eq!(c.paths.outputs, PathBuf::from("out dir"));
        assert!(PipelineConfig::default().with_overrides(&["nope=1"]).is_err());
        assert!(PipelineConfig::default().with_overrides(&["resolution=abc"]).is_err());
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("resolution = 32\nbogus = 1\n").is_err());
        let c = PipelineConfig::from_toml("resolution = 16\n[vae]\nlatent_dim = 4\n").unwrap();
        assert_eq!((c.resolution, c.vae.latent_dim, c.vae.voxel_dim), (16, 4, VaeConfig::desk().voxel_dim));
    }
}
