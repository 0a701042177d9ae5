//! Command-line front end.
//!
//! Exit status: 0 on success, 2 for usage or configuration errors, 1 for runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::bake::{point_psnr, splat_render, SplatAxis};
use crate::error::{Error, Result};
use crate::flow::{self, VelocityNet};
use crate::geometry::{load_point_cloud, write_obj, write_ply_points};
use crate::nnkit::{standard_suite, Checkpoint};
use crate::pipeline::{
    cache_latents, cached_latent, heldout_psnr, parse_mask, train_flow_on_latents, train_vae_on_assets,
    train_vae_on_clouds, vae_digest, Asset, LatentCache, Manifest, PipelineConfig,
};
use crate::vae::{LatentField, PreparedCloud, Vae};

#[derive(Parser, Debug)]
#[command(name = "texfield", version, about = "Sparse latent color fields: train, generate and bake textures")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set vae.latent_dim=4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    resolution: Option<u32>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    vae_density: Option<usize>,
    #[arg(long, global = true)]
    flow_density: Option<usize>,
    #[arg(long, global = true)]
    outputs: Option<PathBuf>,
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,
    /// Manifest path (default: `<outputs>/<command>.manifest.jsonl`).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a colored surface point cloud from a mesh and write it as PLY.
    Sample {
        #[arg(long)]
        mesh: PathBuf,
        /// Point count (default: `vae_density`).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        monochrome: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Canonicalize materials, drop outline shells, normalize and write OBJ.
    Curate {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the VAE on meshes and/or point clouds.
    TrainVae {
        #[arg(long)]
        mesh: Vec<PathBuf>,
        #[arg(long)]
        cloud: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from an existing VAE checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode texture and geometry latents (through the latent cache).
    Encode {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long, required = true)]
        mesh: Vec<PathBuf>,
        /// Sampling density (default: `vae_density`).
        #[arg(long)]
        density: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the geometry-conditioned albedo flow on cached latents.
    TrainFlow {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long, required = true)]
        mesh: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Carry weights over from an earlier flow checkpoint (e.g. a lower resolution).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a texture latent for a mesh.
    Generate {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        /// Euler steps (default: `sample_steps`).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the masked voxels of a latent, keeping the rest.
    Refine {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        /// Mask file: `i j k` keys, `box x0 y0 z0 x1 y1 z1`, `sphere x y z r` or `all`.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bake a latent color field into the mesh's UV texture (PNG, coverage in alpha).
    Bake {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        /// Latent to bake (default: the mesh's own encoded texture).
        #[arg(long)]
        latent: Option<PathBuf>,
        /// Texture width and height.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        supersamples: Option<usize>,
        /// Put `v = 0` on the first image row.
        #[arg(long)]
        v_flip: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Point-space PSNR on held-out surface samples.
    Eval {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        /// Evaluate reconstruction of the mesh's own encoded texture.
        #[arg(long, conflicts_with = "latent")]
        recon: bool,
        #[arg(long)]
        latent: Option<PathBuf>,
        /// Held-out point count.
        #[arg(long, default_value_t = 20_000)]
        points: usize,
        /// Also render the held-out predictions from this axis (+x, -x, +y, -y, +z, -z).
        #[arg(long)]
        splat: Option<SplatAxis>,
        #[arg(long, default_value_t = 256)]
        splat_size: usize,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Sample { .. } => "sample",
            Command::Curate { .. } => "curate",
            Command::TrainVae { .. } => "train-vae",
            Command::Encode { .. } => "encode",
            Command::TrainFlow { .. } => "train-flow",
            Command::Generate { .. } => "generate",
            Command::Refine { .. } => "refine",
            Command::Bake { .. } => "bake",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }

    /// Command flags that mirror config keys.
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut push = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{key}={v}"));
            }
        };
        match self {
            Command::TrainVae { steps, lr, .. } => {
                push("train_vae.steps", steps.map(|s| s.to_string()));
                push("train_vae.lr", lr.map(|s| format!("{s:e}")));
            }
            Command::TrainFlow { steps, lr, .. } => {
                push("train_flow.steps", steps.map(|s| s.to_string()));
                push("train_flow.lr", lr.map(|s| format!("{s:e}")));
            }
            Command::Generate { steps, .. } | Command::Refine { steps, .. } => {
                push("sample_steps", steps.map(|s| s.to_string()));
            }
            Command::Bake { size, supersamples, .. } => {
                push("bake.width", size.map(|s| s.to_string()));
                push("bake.height", size.map(|s| s.to_string()));
                push("bake.supersamples", supersamples.map(|s| s.to_string()));
            }
            _ => {}
        }
        o
    }
}

fn quoted(p: &Path) -> String {
    toml::Value::String(p.to_string_lossy().into_owned()).to_string()
}

/// Defaults, then the config file, then `--set` pairs, then dedicated flags.
fn resolve_config(g: &GlobalArgs, command: &Command) -> Result<PipelineConfig> {
    let base = match &g.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Error::Config(format!("cannot read {}: {e}", path.display())),
            e => e,
        })?,
        None => PipelineConfig::default(),
    };
    let mut overrides = g.set.clone();
    let mut push = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push(format!("{key}={v}"));
        }
    };
    push("seed", g.seed.map(|v| v.to_string()));
    push("resolution", g.resolution.map(|v| v.to_string()));
    push("workers", g.workers.map(|v| v.to_string()));
    push("vae_density", g.vae_density.map(|v| v.to_string()));
    push("flow_density", g.flow_density.map(|v| v.to_string()));
    push("paths.outputs", g.outputs.as_deref().map(quoted));
    push("paths.cache", g.cache.as_deref().map(quoted));
    push("paths.checkpoints", g.checkpoints.as_deref().map(quoted));
    overrides.extend(command.overrides());
    let cfg = base.with_overrides(&overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn load_vae(path: &Path, m: &mut Manifest) -> Result<Vae<f32>> {
    m.input("vae", path)?;
    Vae::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_flow(path: &Path, m: &mut Manifest) -> Result<VelocityNet<f32>> {
    m.input("flow", path)?;
    VelocityNet::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_asset(path: &Path, m: &mut Manifest) -> Result<Asset> {
    m.input("mesh", path)?;
    let asset = Asset::load(path)?;
    m.metric(&format!("asset_digest:{}", asset.name), &asset.digest);
    Ok(asset)
}

fn save_latent(latent: &LatentField, path: &Path, role: &str, m: &mut Manifest) -> Result<()> {
    ensure_parent(path)?;
    latent.save(path)?;
    m.output(role, path)?;
    Ok(())
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path, m: &mut Manifest) -> Result<()> {
    ensure_parent(path)?;
    ckpt.save(path)?;
    m.output("checkpoint", path)?;
    Ok(())
}

fn log_losses(m: &mut Manifest, losses: &[f64]) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        m.metric("loss_first", first);
        m.metric("loss_last", last);
    }
}

fn progress(every: usize) -> impl FnMut(usize, f64) {
    move |step, loss| {
        if step % every == 0 {
            info!("step {step} loss {loss:.6}");
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global, &cli.command)?;
    let command = &cli.command;
    let outputs = cfg.paths.outputs.clone();
    let cache = LatentCache::new(cfg.cache_dir());
    let mut m = Manifest::new(command.name());
    m.config(&cfg);
    m.seed("seed", cfg.seed);

    match command {
        Command::Sample { mesh, count, monochrome, out } => {
            let asset = load_asset(mesh, &mut m)?;
            let samples = asset.sample(count.unwrap_or(cfg.vae_density), cfg.seed, "sample", *monochrome)?;
            let out = out.clone().unwrap_or_else(|| outputs.join(format!("{}.ply", asset.name)));
            ensure_parent(&out)?;
            write_ply_points(&out, &samples)?;
            m.output("cloud", &out)?;
            m.metric("points", samples.len());
        }
        Command::Curate { mesh, out } => {
            m.input("mesh", mesh)?;
            let raw = crate::geometry::load_mesh(mesh)?;
            let asset = Asset::from_mesh(mesh.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), &raw)?;
            let out = out.clone().unwrap_or_else(|| outputs.join(format!("{}.curated.obj", asset.name)));
            ensure_parent(&out)?;
            write_obj(&out, &asset.mesh)?;
            m.output("mesh", &out)?;
            m.metric("faces_in", raw.faces.len());
            m.metric("faces_out", asset.mesh.faces.len());
            m.metric("emissive_materials", raw.materials.iter().filter(|x| x.is_emissive()).count());
        }
        Command::TrainVae { mesh, cloud, init, out, .. } => {
            if mesh.is_empty() && cloud.is_empty() {
                return Err(Error::Config("train-vae needs at least one --mesh or --cloud".into()));
            }
            let init = init.as_deref().map(|p| load_vae(p, &mut m)).transpose()?;
            let assets = mesh.iter().map(|p| load_asset(p, &mut m)).collect::<Result<Vec<_>>>()?;
            let (vae, losses) = if cloud.is_empty() {
                train_vae_on_assets(&cfg, &assets, init, progress(100))?
            } else {
                let mut clouds = Vec::new();
                for a in &assets {
                    clouds.push(PreparedCloud::new(a.sample(cfg.vae_density, cfg.seed, "sample", false)?, cfg.resolution)?);
                }
                for p in cloud {
                    m.input("cloud", p)?;
                    clouds.push(PreparedCloud::new(load_point_cloud(p)?, cfg.resolution)?);
                }
                train_vae_on_clouds(&cfg, clouds, init, progress(100))?
            };
            log_losses(&mut m, &losses);
            let out = out.clone().unwrap_or_else(|| cfg.paths.checkpoints.join("vae.ckpt"));
            save_checkpoint(&vae.to_checkpoint(), &out, &mut m)?;
        }
        Command::Encode { vae, mesh, density, out_dir } => {
            let vae = load_vae(vae, &mut m)?;
            let assets = mesh.iter().map(|p| load_asset(p, &mut m)).collect::<Result<Vec<_>>>()?;
            let (latents, report) = cache_latents(&cfg, &cache, &vae, &assets, density.unwrap_or(cfg.vae_density))?;
            report.record_into(&mut m);
            let dir = out_dir.clone().unwrap_or(outputs);
            for l in &latents {
                save_latent(&l.texture, &dir.join(format!("{}.texture.latf", l.name)), "texture", &mut m)?;
                save_latent(&l.geometry, &dir.join(format!("{}.geometry.latf", l.name)), "geometry", &mut m)?;
            }
            info!("{} latents, {} cache hits, {} encodes", report.records.len(), report.hits(), report.encodes);
        }
        Command::TrainFlow { vae, mesh, init, out, .. } => {
            let vae = load_vae(vae, &mut m)?;
            let init = init.as_deref().map(|p| load_flow(p, &mut m)).transpose()?;
            let assets = mesh.iter().map(|p| load_asset(p, &mut m)).collect::<Result<Vec<_>>>()?;
            let (latents, report) = cache_latents(&cfg, &cache, &vae, &assets, cfg.flow_density)?;
            report.record_into(&mut m);
            let (net, losses) = train_flow_on_latents(&cfg, &latents, init, progress(100))?;
            log_losses(&mut m, &losses);
            let out = out.clone().unwrap_or_else(|| cfg.paths.checkpoints.join("flow.ckpt"));
            save_checkpoint(&net.to_checkpoint(), &out, &mut m)?;
        }
        Command::Generate { vae, flow, mesh, out, .. } => {
            let vae = load_vae(vae, &mut m)?;
            let net = load_flow(flow, &mut m)?;
            let asset = load_asset(mesh, &mut m)?;
            let (geo, record, _) = cached_latent(&cfg, &cache, &vae, &vae_digest(&vae), &asset, cfg.flow_density, true)?;
            record.record_into(&mut m);
            let seed = asset.seed(cfg.seed, "generate");
            m.seed("generate", seed);
            let latent = flow::sample(&net, &geo, None, cfg.sample_steps, seed)?;
            let out = out.clone().unwrap_or_else(|| outputs.join(format!("{}.generated.latf", asset.name)));
            save_latent(&latent, &out, "latent", &mut m)?;
        }
        Command::Refine { vae, flow, mesh, latent, mask, out, .. } => {
            let vae = load_vae(vae, &mut m)?;
            let net = load_flow(flow, &mut m)?;
            let asset = load_asset(mesh, &mut m)?;
            m.input("latent", latent)?;
            let known = LatentField::load(latent)?;
            m.input("mask", mask)?;
            let text = std::fs::read_to_string(mask).map_err(|e| Error::io(mask, e))?;
            let mask = parse_mask(&text, &known)?;
            let (geo, record, _) = cached_latent(&cfg, &cache, &vae, &vae_digest(&vae), &asset, cfg.flow_density, true)?;
            record.record_into(&mut m);
            let seed = asset.seed(cfg.seed, "refine");
            m.seed("refine", seed);
            let refined = flow::repaint_refine(&net, &known, &mask, &geo, cfg.sample_steps, seed)?;
            m.metric("masked_voxels", mask.count());
            let out = out.clone().unwrap_or_else(|| outputs.join(format!("{}.refined.latf", asset.name)));
            save_latent(&refined, &out, "latent", &mut m)?;
        }
        Command::Bake { vae, mesh, latent, v_flip, out, .. } => {
            let vae = load_vae(vae, &mut m)?;
            let asset = load_asset(mesh, &mut m)?;
            let latent = match latent {
                Some(p) => {
                    m.input("latent", p)?;
                    LatentField::load(p)?
                }
                None => {
                    let (l, record, _) =
                        cached_latent(&cfg, &cache, &vae, &vae_digest(&vae), &asset, cfg.vae_density, false)?;
                    record.record_into(&mut m);
                    l
                }
            };
            let baked = crate::pipeline::bake_latent(&cfg, &vae, &latent, &asset.mesh)?;
            let out = out.clone().unwrap_or_else(|| outputs.join(format!("{}.png", asset.name)));
            ensure_parent(&out)?;
            baked.texture.save_png(&out, *v_flip)?;
            m.output("texture", &out)?;
            m.metric("covered_texels", baked.texture.coverage.iter().filter(|&&c| c).count());
            m.metric("unresolved_texels", baked.unresolved);
        }
        Command::Eval { vae, mesh, latent, points, splat, splat_size, .. } => {
            let vae = load_vae(vae, &mut m)?;
            let asset = load_asset(mesh, &mut m)?;
            let latent = match latent {
                Some(p) => {
                    m.input("latent", p)?;
                    LatentField::load(p)?
                }
                None => {
                    let (l, record, _) =
                        cached_latent(&cfg, &cache, &vae, &vae_digest(&vae), &asset, cfg.vae_density, false)?;
                    record.record_into(&mut m);
                    l
                }
            };
            let report = heldout_psnr(&cfg, &vae, &latent, &asset, *points)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            m.metric("psnr", report);
            if let Some(axis) = splat {
                let held = asset.sample(*points, cfg.seed, "heldout", false)?;
                let pts: Vec<[f64; 3]> = held.iter().map(|s| s.position).collect();
                let pred = vae.color_field(&latent)?.query_all(&pts)?;
                let img = splat_render(&pts, &pred, *axis, *splat_size)?;
                let out = outputs.join(format!("{}.splat.png", asset.name));
                ensure_parent(&out)?;
                img.save_png(&out)?;
                m.output("splat", &out)?;
                let truth: Vec<[f64; 3]> = held.iter().map(|s| s.color).collect();
                debug_assert!(point_psnr(&pred, &truth).is_ok());
            }
        }
        Command::Gradcheck { tolerance } => {
            let reports = standard_suite(*tolerance)?;
            let mut failed = 0;
            for r in &reports {
                println!("{r}");
                m.metric(&format!("gradcheck:{}", r.op), r.max_error());
                failed += usize::from(!r.passed());
            }
            m.metric("gradcheck_failed", failed);
            write_manifest(&cli.global, &cfg, command, &m)?;
            if failed > 0 {
                return Err(Error::Domain(format!("{failed} of {} ops failed the gradient check", reports.len())));
            }
            return Ok(());
        }
    }
    write_manifest(&cli.global, &cfg, command, &m)
}

fn write_manifest(g: &GlobalArgs, cfg: &PipelineConfig, command: &Command, m: &Manifest) -> Result<()> {
    let path = g
        .manifest
        .clone()
        .unwrap_or_else(|| cfg.paths.outputs.join(format!("{}.manifest.jsonl", command.name())));
    m.write(&path)
}

/// Parses `argv` (including the program name), runs the command and returns the exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["texfield"]), 2);
        assert_eq!(run(["texfield", "frobnicate"]), 2);
        assert_eq!(run(["texfield", "sample"]), 2);
        assert_eq!(run(["texfield", "--help"]), 0);
    }

    #[test]
    fn flags_override_file_and_set() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "seed = 5\nresolution = 16\n[train_vae]\nsteps = 7\n").unwrap();
        let cli = Cli::try_parse_from([
            "texfield",
            "--config",
            file.to_str().unwrap(),
            "--set",
            "seed=6",
            "train-vae",
            "--mesh",
            "m.obj",
            "--steps",
            "9",
            "--resolution",
            "64",
        ])
        .unwrap();
        let cfg = resolve_config(&cli.global, &cli.command).unwrap();
        assert_eq!((cfg.seed, cfg.resolution, cfg.train_vae.steps), (6, 64, 9));
    }

    #[test]
    fn invalid_config_exits_2() {
        assert_eq!(run(["texfield", "gradcheck", "--resolution", "48"]), 2);
        assert_eq!(run(["texfield", "gradcheck", "--set", "bogus=1"]), 2);
    }
}
