//! Pipeline orchestration: configuration, assets, latent caching and run manifests.

mod cache;
mod config;
mod manifest;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{sha256_hex, CacheKey, LatentCache};
pub use config::{Paths, PipelineConfig, TrainSection, CACHE_DIR_ENV, SUPPORTED_RESOLUTIONS};
pub use manifest::Manifest;

use crate::bake::{bake_uv, point_psnr, BakeResult, PsnrReport};
use crate::error::{Error, Result};
use crate::flow::{self, FlowExample, FlowRole, FlowTrainOptions, LatentMask, VelocityNet};
use crate::geometry::{curate, load_mesh, sample_surface, ColorAdjust, Mesh, SurfaceSample};
use crate::nnkit::Scalar;
use crate::seed;
use crate::vae::{train_vae, LatentField, PreparedCloud, Vae, VaeTrainOptions};
use crate::voxelgrid::VoxelKey;

/// A curated, normalized mesh with a content digest.
#[derive(Clone, Debug)]
pub struct Asset {
    pub name: String,
    pub mesh: Mesh,
    pub digest: String,
}

impl Asset {
    pub fn load(path: &Path) -> Result<Self> {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "asset".into());
        Self::from_mesh(name, &load_mesh(path)?)
    }

    /// Curates `mesh` and fingerprints the result.
    pub fn from_mesh(name: impl Into<String>, mesh: &Mesh) -> Result<Self> {
        let mesh = curate(mesh)?;
        let digest = mesh_digest(&mesh);
        Ok(Self { name: name.into(), mesh, digest })
    }

    /// Seed of this asset's `tag` stream; independent of asset order and worker count.
    pub fn seed(&self, base: u64, tag: &str) -> u64 {
        let id = u64::from_str_radix(&self.digest[..16], 16).expect("hex digest");
        seed::derive(base, tag, id)
    }

    pub fn sample(&self, count: usize, base: u64, tag: &str, monochrome: bool) -> Result<Vec<SurfaceSample>> {
        sample_surface(&self.mesh, count, self.seed(base, tag), monochrome)
    }
}

/// SHA-256 over a mesh's geometry, UVs and resolved color sources.
pub fn mesh_digest(mesh: &Mesh) -> String {
    let mut h = Sha256::new();
    let mut f = |x: f64| h.update(x.to_le_bytes());
    for p in &mesh.positions {
        p.iter().for_each(|&x| f(x));
    }
    for c in mesh.vertex_colors.iter().flatten() {
        c.iter().for_each(|&x| f(x));
    }
    for uv in mesh.face_uvs.iter().flatten() {
        uv.iter().flatten().for_each(|&x| f(x));
    }
    for m in &mesh.materials {
        m.base_color.iter().chain(&m.emission).for_each(|&x| f(x));
        f(m.emission_strength);
        f(if m.vertex_colors { 1.0 } else { 0.0 });
        f(if m.outline { 1.0 } else { 0.0 });
        let (tag, e) = match m.adjust {
            ColorAdjust::None => (0.0, [0.0; 3]),
            ColorAdjust::Replace(e) => (1.0, e),
            ColorAdjust::AddReinhard(e) => (2.0, e),
        };
        f(tag);
        e.iter().for_each(|&x| f(x));
        if let Some(t) = &m.texture {
            f(t.width as f64);
            f(t.height as f64);
            t.texels.iter().flatten().for_each(|&x| f(x));
        }
    }
    for (face, &mat) in mesh.faces.iter().zip(&mesh.face_material) {
        face.iter().for_each(|&i| h.update(i.to_le_bytes()));
        h.update(mat.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Maps `f` over `items` on up to `workers` threads, preserving order.
pub fn parallel_map<I, O, F>(items: &[I], workers: usize, f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Result<Vec<O>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Content digest of a VAE's checkpoint bytes.
pub fn vae_digest<T: Scalar>(vae: &Vae<T>) -> String {
    sha256_hex(&vae.to_checkpoint().to_bytes())
}

/// Texture and geometry latents of one asset.
#[derive(Clone, Debug)]
pub struct AssetLatents {
    pub name: String,
    pub texture: LatentField,
    pub geometry: LatentField,
}

/// One cache lookup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub asset: String,
    pub kind: String,
    pub key: String,
    pub latent_sha256: String,
    pub hit: bool,
}

impl CacheRecord {
    pub fn record_into(&self, manifest: &mut Manifest) {
        manifest.push(serde_json::json!({
            "record": "cache",
            "asset": self.asset,
            "kind": self.kind,
            "key": self.key,
            "sha256": self.latent_sha256,
            "hit": self.hit,
        }));
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CacheReport {
    pub records: Vec<CacheRecord>,
    /// Encoder passes actually run.
    pub encodes: usize,
}

impl CacheReport {
    pub fn hits(&self) -> usize {
        self.records.iter().filter(|r| r.hit).count()
    }

    pub fn record_into(&self, manifest: &mut Manifest) {
        for r in &self.records {
            r.record_into(manifest);
        }
        manifest.metric("encodes", self.encodes);
    }
}

/// One latent of `asset` at `density`: texture (`monochrome = false`) or geometry.
///
/// Returns the latent, its cache record and whether an encoder pass ran.
pub fn cached_latent<T: Scalar>(
    cfg: &PipelineConfig,
    cache: &LatentCache,
    vae: &Vae<T>,
    vae_hash: &str,
    asset: &Asset,
    density: usize,
    monochrome: bool,
) -> Result<(LatentField, CacheRecord, bool)> {
    let r = cfg.resolution;
    let key = CacheKey {
        asset: asset.digest.clone(),
        resolution: r,
        density,
        monochrome,
        vae: vae_hash.to_string(),
        seed: cfg.seed,
    };
    let (latent, hit) = cache.get_or_insert_with(&key, || {
        let samples = asset.sample(density, cfg.seed, "sample", false)?;
        if monochrome {
            vae.geometry_latent(&samples, r)
        } else {
            vae.encode(&samples, r, asset.seed(cfg.seed, "encode"), false)
        }
    })?;
    let record = CacheRecord {
        asset: asset.name.clone(),
        kind: if monochrome { "geometry" } else { "texture" }.into(),
        key: key.digest(),
        latent_sha256: sha256_hex(&latent.to_bytes()),
        hit,
    };
    Ok((latent, record, !hit))
}

/// Texture and geometry latents for every asset at `density`, served from `cache` when possible.
pub fn cache_latents<T: Scalar>(
    cfg: &PipelineConfig,
    cache: &LatentCache,
    vae: &Vae<T>,
    assets: &[Asset],
    density: usize,
) -> Result<(Vec<AssetLatents>, CacheReport)> {
    let vae_hash = vae_digest(vae);
    let per_asset = parallel_map(assets, cfg.workers, |asset| {
        let (texture, tr, te) = cached_latent(cfg, cache, vae, &vae_hash, asset, density, false)?;
        let (geometry, gr, ge) = cached_latent(cfg, cache, vae, &vae_hash, asset, density, true)?;
        Ok((AssetLatents { name: asset.name.clone(), texture, geometry }, [tr, gr], te as usize + ge as usize))
    })?;
    let mut report = CacheReport::default();
    let mut latents = Vec::with_capacity(per_asset.len());
    for (l, records, encodes) in per_asset {
        latents.push(l);
        report.records.extend(records);
        report.encodes += encodes;
    }
    Ok((latents, report))
}

/// Samples every asset at the VAE density and trains a fresh VAE on them.
pub fn train_vae_on_assets(
    cfg: &PipelineConfig,
    assets: &[Asset],
    init: Option<Vae<f32>>,
    on_step: impl FnMut(usize, f64),
) -> Result<(Vae<f32>, Vec<f64>)> {
    if assets.is_empty() {
        return Err(Error::InvalidArgument("no training assets".into()));
    }
    let clouds = parallel_map(assets, cfg.workers, |a| {
        PreparedCloud::new(a.sample(cfg.vae_density, cfg.seed, "sample", false)?, cfg.resolution)
    })?;
    train_vae_on_clouds(cfg, clouds, init, on_step)
}

pub fn train_vae_on_clouds(
    cfg: &PipelineConfig,
    clouds: Vec<PreparedCloud>,
    init: Option<Vae<f32>>,
    on_step: impl FnMut(usize, f64),
) -> Result<(Vae<f32>, Vec<f64>)> {
    let mut vae = match init {
        Some(v) => v,
        None => Vae::new(cfg.vae.clone(), seed::derive(cfg.seed, "vae-init", 0))?,
    };
    let opts = VaeTrainOptions {
        steps: cfg.train_vae.steps,
        lr: cfg.train_vae.lr,
        resolution: cfg.resolution,
        seed: cfg.seed,
        grad_clip: cfg.train_vae.clip(),
        plateau: None,
    };
    let losses = train_vae(&mut vae, &clouds, &opts, on_step)?;
    Ok((vae, losses))
}

/// Trains an albedo velocity network on cached (texture, geometry) latent pairs.
pub fn train_flow_on_latents(
    cfg: &PipelineConfig,
    latents: &[AssetLatents],
    init: Option<VelocityNet<f32>>,
    on_step: impl FnMut(usize, f64),
) -> Result<(VelocityNet<f32>, Vec<f64>)> {
    let examples = latents
        .iter()
        .map(|l| FlowExample::new(l.texture.mean_field(), l.geometry.clone(), None))
        .collect::<Result<Vec<_>>>()?;
    let mut net = match init {
        Some(n) => n,
        None => VelocityNet::new(cfg.flow.clone(), FlowRole::Albedo, seed::derive(cfg.seed, "flow-init", 0))?,
    };
    let opts = FlowTrainOptions {
        steps: cfg.train_flow.steps,
        lr: cfg.train_flow.lr,
        seed: cfg.seed,
        grad_clip: cfg.train_flow.clip(),
        cosine: cfg.train_flow.cosine,
    };
    let losses = flow::train_flow(&mut net, &examples, &opts, on_step)?;
    Ok((net, losses))
}

/// Reads a mask file: voxel keys `i j k`, `box x0 y0 z0 x1 y1 z1`, `sphere x y z r` or `all`.
///
/// Lines combine by union; `#` starts a comment. Regions test voxel centers.
pub fn parse_mask(text: &str, latent: &LatentField) -> Result<LatentMask> {
    let voxels = &latent.voxels;
    let r = voxels.resolution();
    let mut mask = vec![false; voxels.len()];
    let centers = voxels.centers();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Parse(format!("mask line {}: '{line}'", lineno + 1));
        let mut words = line.split_whitespace();
        let head = words.next().expect("non-empty");
        let nums = |words: std::str::SplitWhitespace<'_>| -> Result<Vec<f64>> {
            words.map(|w| w.parse::<f64>().map_err(|_| bad())).collect()
        };
        match head {
            "all" => mask.iter_mut().for_each(|m| *m = true),
            "box" => {
                let v = nums(words)?;
                if v.len() != 6 {
                    return Err(bad());
                }
                for (m, c) in mask.iter_mut().zip(&centers) {
                    if (0..3).all(|a| c[a] >= v[a].min(v[a + 3]) && c[a] <= v[a].max(v[a + 3])) {
                        *m = true;
                    }
                }
            }
            "sphere" => {
                let v = nums(words)?;
                if v.len() != 4 {
                    return Err(bad());
                }
                for (m, c) in mask.iter_mut().zip(&centers) {
                    let d2: f64 = (0..3).map(|a| (c[a] - v[a]) * (c[a] - v[a])).sum();
                    if d2 <= v[3] * v[3] {
                        *m = true;
                    }
                }
            }
            _ => {
                let ijk: Vec<u32> = line.split_whitespace().map(|w| w.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                if ijk.len() != 3 || ijk.iter().any(|&x| x >= r) {
                    return Err(bad());
                }
                if let Some(i) = voxels.find(VoxelKey::new(ijk[0], ijk[1], ijk[2])) {
                    mask[i] = true;
                }
            }
        }
    }
    Ok(LatentMask(mask))
}

/// Bakes the decoded color field of `latent` onto `mesh`'s UV atlas.
pub fn bake_latent<T: Scalar>(cfg: &PipelineConfig, vae: &Vae<T>, latent: &LatentField, mesh: &Mesh) -> Result<BakeResult> {
    let field = vae.color_field(latent)?;
    bake_uv(mesh, &field, &cfg.bake)
}

/// Point-space PSNR of `latent`'s field against `count` held-out surface colors of `asset`.
pub fn heldout_psnr<T: Scalar>(
    cfg: &PipelineConfig,
    vae: &Vae<T>,
    latent: &LatentField,
    asset: &Asset,
    count: usize,
) -> Result<PsnrReport> {
    let held = asset.sample(count, cfg.seed, "heldout", false)?;
    let pts: Vec<[f64; 3]> = held.iter().map(|s| s.position).collect();
    let truth: Vec<[f64; 3]> = held.iter().map(|s| s.color).collect();
    let pred = vae.color_field(latent)?.query_all(&pts)?;
    point_psnr(&pred, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes::checker_sphere;
    use crate::voxelgrid::SparseVoxelSet;

    #[test]
    fn parallel_map_preserves_order_for_any_worker_count() {
        let items: Vec<u64> = (0..23).collect();
        let serial = parallel_map(&items, 1, |&x| Ok(seed::derive(x, "t", 0))).unwrap();
        for w in [2, 3, 8, 64] {
            assert_eq!(parallel_map(&items, w, |&x| Ok(seed::derive(x, "t", 0))).unwrap(), serial);
        }
        assert!(parallel_map(&items, 4, |&x| if x == 9 { Err(Error::Domain("x".into())) } else { Ok(x) }).is_err());
    }

    #[test]
    fn digest_tracks_texture_content() {
        let a = checker_sphere(16, 8, 4, 2, [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let b = checker_sphere(16, 8, 4, 2, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        assert_eq!(mesh_digest(&a), mesh_digest(&a.clone()));
        assert_ne!(mesh_digest(&a), mesh_digest(&b));
        let asset = Asset::from_mesh("a", &a).unwrap();
        assert_ne!(asset.seed(0, "sample"), asset.seed(0, "heldout"));
    }

    #[test]
    fn mask_lines_combine_by_union() {
        let keys = vec![VoxelKey::new(0, 0, 0), VoxelKey::new(1, 1, 1), VoxelKey::new(3, 3, 3)];
        let voxels = SparseVoxelSet::from_keys(4, keys).unwrap();
        let latent = LatentField::from_codes(voxels, 1, vec![0.0; 3]).unwrap();
        let m = parse_mask("# keys\n0 0 0\nbox 0.0 0.0 0.0 0.5 0.5 0.5\n", &latent).unwrap();
        assert_eq!(m.0, vec![true, false, true]);
        let m = parse_mask("sphere -0.375 -0.375 -0.375 0.01", &latent).unwrap();
        assert_eq!(m.0, vec![true, false, false]);
        assert_eq!(parse_mask("all", &latent).unwrap().count(), 3);
        assert!(parse_mask("box 1 2", &latent).is_err());
        assert!(parse_mask("9 9 9", &latent).is_err());
    }
}
