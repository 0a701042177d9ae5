//! Acceptance checks: one PASS/FAIL line per criterion.
//!
//! Pass criterion numbers to run a subset: `cargo test --test acceptance -- 2 7`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use common::{attention_loops, max_diff, project, random, rows};
use rand::Rng;
use texfield::bake::{bake_uv, point_psnr, rasterize_uv, BakeOptions, SubsamplePattern};
use texfield::flow::{
    flow_loss, repaint_refine, sample, train_flow, training_batch, FlowConfig, FlowExample, FlowRole, FlowTrainOptions,
    LatentMask, VelocityNet,
};
use texfield::geometry::shapes::{checker_sphere, uv_sphere};
use texfield::geometry::{
    canonicalize_materials, component_alignment, filter_outline_shells, sample_surface, write_obj, Material, Mesh,
    SurfaceSample,
};
use texfield::nnkit::{standard_suite, Tape, Tensor};
use texfield::vae::attention::{intra_voxel_attention, point_voxel_cross_attention};
use texfield::vae::{train_vae, LatentField, Plateau, PreparedCloud, Vae, VaeConfig, VaeTrainOptions};
use texfield::voxelgrid::voxelize_points;

const RED: [f64; 3] = [0.85, 0.2, 0.15];
const BLUE: [f64; 3] = [0.15, 0.25, 0.85];
const R: u32 = 32;
const FLOW_R: u32 = 16;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// The overfit checkerboard model shared by several criteria.
struct Overfit {
    mesh: Mesh,
    vae: Vae<f32>,
    train: Vec<SurfaceSample>,
    held: Vec<SurfaceSample>,
    untrained_psnr: f64,
    trained_psnr: f64,
    steps: usize,
    seconds: f64,
}

/// Flow nets trained on latents of the overfit model.
struct Flows {
    pair_ratio: f64,
    pair_initial: f64,
    single_error: f64,
    pair: VelocityNet<f32>,
}

#[derive(Default)]
struct Ctx {
    overfit: OnceLock<Overfit>,
    flows: OnceLock<Flows>,
}

fn heldout_psnr(vae: &Vae<f32>, latent: &LatentField, held: &[SurfaceSample], snap: f64) -> f64 {
    let points: Vec<[f64; 3]> = held.iter().map(|s| s.position).collect();
    let truth: Vec<[f64; 3]> = held.iter().map(|s| s.color).collect();
    let field = vae.color_field(latent).unwrap().with_snap_radius(snap);
    point_psnr(&field.query_all(&points).unwrap(), &truth).unwrap().psnr
}

impl Ctx {
    fn overfit(&self) -> &Overfit {
        self.overfit.get_or_init(|| {
            let mesh = checker_sphere(64, 32, 8, 4, RED, BLUE);
            let train = sample_surface(&mesh, 200_000, 1, false).unwrap();
            let held = sample_surface(&mesh, 20_000, 2, false).unwrap();
            let mut vae = Vae::<f32>::new(VaeConfig::desk(), 0).unwrap();
            let snap = 0.5 / R as f64;
            let untrained_psnr = heldout_psnr(&vae, &vae.encode(&train, R, 0, false).unwrap(), &held, snap);
            let opts = VaeTrainOptions {
                steps: 20_000,
                lr: 1e-4,
                resolution: R,
                plateau: Some(Plateau { window: 250, patience: 4, min_improvement: 0.01 }),
                ..VaeTrainOptions::default()
            };
            let t0 = Instant::now();
            let cloud = PreparedCloud::new(train.clone(), R).unwrap();
            let losses = train_vae(&mut vae, &[cloud], &opts, |_, _| {}).unwrap();
            let seconds = t0.elapsed().as_secs_f64();
            let trained_psnr = heldout_psnr(&vae, &vae.encode(&train, R, 0, false).unwrap(), &held, snap);
            Overfit { mesh, vae, train, held, untrained_psnr, trained_psnr, steps: losses.len(), seconds }
        })
    }

    fn flows(&self) -> &Flows {
        self.flows.get_or_init(|| {
            let o = self.overfit();
            let other = checker_sphere(64, 32, 4, 2, [0.9, 0.9, 0.2], [0.1, 0.6, 0.2]);
            let s1 = &o.train;
            let s2 = sample_surface(&other, 200_000, 1, false).unwrap();
            let geo = o.vae.geometry_latent(s1, FLOW_R).unwrap();
            let t1 = o.vae.encode(s1, FLOW_R, 0, false).unwrap().mean_field();
            let t2 = o.vae.encode(&s2, FLOW_R, 0, false).unwrap().mean_field();
            let opts = FlowTrainOptions { steps: 5000, lr: 1e-3, seed: 0, grad_clip: Some(1.0), cosine: true };

            let pair = [
                FlowExample::new(t1.clone(), geo.clone(), None).unwrap(),
                FlowExample::new(t2, geo.clone(), None).unwrap(),
            ];
            let eval = |net: &VelocityNet<f32>, ex: &[FlowExample]| {
                let losses: Vec<f64> = ex
                    .iter()
                    .flat_map(|e| (0..16).map(move |i| flow_loss(net, &training_batch(e, 12_345, i).unwrap()).unwrap()))
                    .collect();
                losses.iter().sum::<f64>() / losses.len() as f64
            };
            let mut net = VelocityNet::<f32>::new(FlowConfig::default(), FlowRole::Albedo, 0).unwrap();
            let pair_initial = eval(&net, &pair);
            train_flow(&mut net, &pair, &opts, |_, _| {}).unwrap();
            let pair_ratio = eval(&net, &pair) / pair_initial;

            let single = [FlowExample::new(t1.clone(), geo.clone(), None).unwrap()];
            let mut one = VelocityNet::<f32>::new(FlowConfig::default(), FlowRole::Albedo, 0).unwrap();
            train_flow(&mut one, &single, &opts, |_, _| {}).unwrap();
            let norm = t1.z.iter().map(|x| x * x).sum::<f64>().sqrt();
            let single_error = (0..4)
                .map(|seed| {
                    let x = sample(&one, &geo, None, 1, seed).unwrap();
                    x.z.iter().zip(&t1.z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / norm
                })
                .sum::<f64>()
                / 4.0;
            Flows { pair_ratio, pair_initial, single_error, pair: net }
        })
    }
}

fn gradients(_: &Ctx) -> Outcome {
    let t0 = Instant::now();
    let reports = standard_suite(1e-5).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_error()).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    outcome(
        failed.is_empty() && secs < 60.0,
        format!("{} ops, max relative error {worst:.2e}, failing {failed:?}, {secs:.1}s", reports.len()),
    )
}

fn attention_oracles(_: &Ctx) -> Outcome {
    let mut rng = common::rng(2024);
    let sizes: Vec<usize> = (0..20).map(|_| rng.gen_range(1..=6)).collect();
    let mut offsets = vec![0];
    for s in &sizes {
        offsets.push(offsets.last().unwrap() + s);
    }
    let n = *offsets.last().unwrap();
    let (din, dk, dv) = (5, 4, 3);
    let h = random(&mut rng, &[n, din]);
    let q = random(&mut rng, &[1, din]);
    let (wq, wk, wv) = (random(&mut rng, &[din, dk]), random(&mut rng, &[din, dk]), random(&mut rng, &[din, dv]));
    let hr = rows(&h);

    let mut t = Tape::<f64>::new();
    let [hv, qv, wqv, wkv, wvv] = [h.clone(), q.clone(), wq.clone(), wk.clone(), wv.clone()].map(|x| t.leaf(x));
    let intra = intra_voxel_attention(&mut t, hv, wqv, wkv, wvv, &offsets).unwrap();
    let intra = rows(t.value(intra));
    let cross = point_voxel_cross_attention(&mut t, hv, qv, wqv, wkv, wvv, &offsets).unwrap();
    let cross = rows(t.value(cross));

    let (mut intra_err, mut cross_err) = (0.0f64, 0.0f64);
    let qp = project(&rows(&q), &wq);
    for (v, w) in offsets.windows(2).enumerate() {
        let seg = &hr[w[0]..w[1]];
        let (k, val) = (project(seg, &wk), project(seg, &wv));
        intra_err = intra_err.max(max_diff(&intra[w[0]..w[1]], &attention_loops(&project(seg, &wq), &k, &val)));
        cross_err = cross_err.max(max_diff(&cross[v..v + 1], &attention_loops(&qp, &k, &val)));
    }
    outcome(
        intra_err < 1e-10 && cross_err < 1e-10,
        format!("20 voxels ({n} points): intra-voxel max error {intra_err:.2e}, cross {cross_err:.2e}"),
    )
}

fn trilinear_exactness(_: &Ctx) -> Outcome {
    let mut rng = common::rng(3);
    let pts: Vec<[f64; 3]> = (0..60).map(|_| [0, 1, 2].map(|_| rng.gen_range(-0.49..0.49))).collect();
    let voxels = voxelize_points(&pts, 8).unwrap();
    let channels = 3;
    let coef: Vec<[f64; 8]> = (0..channels).map(|_| [0; 8].map(|_| rng.gen_range(-2.0..2.0))).collect();
    let f = |c: &[f64; 8], p: [f64; 3]| {
        let [x, y, z] = p;
        c[0] + c[1] * x + c[2] * y + c[3] * z + c[4] * x * y + c[5] * x * z + c[6] * y * z + c[7] * x * y * z
    };
    let h = 1.0 / 8.0;
    let mut grid = Vec::new();
    for key in voxels.keys() {
        let lo = key.min_corner(8);
        for corner in 0..8 {
            let p = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1].map(|b| b as f64 * h);
            let p = [lo[0] + p[0], lo[1] + p[1], lo[2] + p[2]];
            grid.extend(coef.iter().map(|c| f(c, p)));
        }
    }
    let cells: Vec<usize> = (0..100).map(|_| rng.gen_range(0..voxels.len())).collect();
    let local: Vec<[f64; 3]> = (0..100).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..=1.0))).collect();
    let mut t = Tape::<f64>::new();
    let g = t.leaf(Tensor::new(&[voxels.len(), 8 * channels], grid).unwrap());
    let c = t.leaf(Tensor::new(&[100, 3], local.iter().flatten().copied().collect()).unwrap());
    let out = t.trilinear(g, c, Arc::from(cells.clone())).unwrap();
    let out = t.value(out);
    let mut worst = 0.0f64;
    for (i, (&cell, l)) in cells.iter().zip(&local).enumerate() {
        let lo = voxels.keys()[cell].min_corner(8);
        let p = [lo[0] + l[0] * h, lo[1] + l[1] * h, lo[2] + l[2] * h];
        for (ch, cf) in coef.iter().enumerate() {
            worst = worst.max((out.row(i)[ch] - f(cf, p)).abs());
        }
    }
    outcome(worst < 1e-12, format!("100 points over {} voxels, max error {worst:.2e}", voxels.len()))
}

fn overfit(ctx: &Ctx) -> Outcome {
    let o = ctx.overfit();
    outcome(
        o.trained_psnr >= 28.0 && o.untrained_psnr <= 12.0 && o.seconds <= 3600.0,
        format!(
            "held-out PSNR {:.2} dB after {} steps ({:.0}s), untrained {:.2} dB",
            o.trained_psnr, o.steps, o.seconds, o.untrained_psnr
        ),
    )
}

fn density(ctx: &Ctx) -> Outcome {
    let o = ctx.overfit();
    let sparse = sample_surface(&o.mesh, 20_000, 3, false).unwrap();
    // sparse clouds leave gaps; both densities use the same wider snap so every point is scored
    let snap = 1.5 / R as f64;
    let low = heldout_psnr(&o.vae, &o.vae.encode(&sparse, R, 0, false).unwrap(), &o.held, snap);
    let high = heldout_psnr(&o.vae, &o.vae.encode(&o.train, R, 0, false).unwrap(), &o.held, snap);
    outcome(high - low >= 1.0, format!("2e4 points {low:.2} dB, 2e5 points {high:.2} dB, gain {:.2} dB", high - low))
}

fn factorization(ctx: &Ctx) -> Outcome {
    let o = ctx.overfit();
    let mut rng = common::rng(6);
    let mut geos = Vec::new();
    let mut textures = Vec::new();
    let mut positions = None;
    for _ in 0..10 {
        let a = [0; 3].map(|_| rng.gen_range(0.0..1.0));
        let b = [0; 3].map(|_| rng.gen_range(0.0..1.0));
        let cells = rng.gen_range(1..=4);
        let mesh = checker_sphere(64, 32, 2 * cells, cells, a, b);
        let s = sample_surface(&mesh, 50_000, 4, false).unwrap();
        let pos: Vec<[f64; 3]> = s.iter().map(|p| p.position).collect();
        assert!(positions.get_or_insert_with(|| pos.clone()) == &pos, "recoloring moved the samples");
        geos.push(o.vae.geometry_latent(&s, R).unwrap().to_bytes());
        textures.push(o.vae.encode(&s, R, 0, false).unwrap().mean);
    }
    let identical = geos.iter().all(|g| g == &geos[0]);
    let mut distinct = 0;
    let mut pairs = 0;
    for i in 0..textures.len() {
        for j in i + 1..textures.len() {
            pairs += 1;
            distinct += usize::from(textures[i] != textures[j]);
        }
    }
    outcome(
        identical && distinct == pairs,
        format!("geometry latents identical: {identical}; texture latents distinct in {distinct}/{pairs} pairs"),
    )
}

fn flow_sanity(ctx: &Ctx) -> Outcome {
    let f = ctx.flows();
    outcome(
        f.pair_ratio < 0.1 && f.single_error <= 0.05,
        format!(
            "2-asset loss {:.3} -> {:.4} (ratio {:.4}) in 5000 steps; 1-asset one-step relative error {:.3}",
            f.pair_initial,
            f.pair_initial * f.pair_ratio,
            f.pair_ratio,
            f.single_error
        ),
    )
}

fn repaint_preservation(ctx: &Ctx) -> Outcome {
    let o = ctx.overfit();
    let net = &ctx.flows().pair;
    let known = o.vae.encode(&o.train, R, 0, false).unwrap().mean_field();
    let geo = o.vae.geometry_latent(&o.train, R).unwrap();
    let mask = LatentMask::from_region(&known.voxels, |c| c[0] > 0.0);
    let refined = repaint_refine(net, &known, &mask, &geo, 50, 8).unwrap();
    let kept = (0..known.len()).filter(|&i| !mask.0[i]).all(|i| refined.row(i) == known.row(i));

    let snap = 0.5 / R as f64;
    let before = o.vae.color_field(&known).unwrap();
    let after = o.vae.color_field(&refined).unwrap();
    let points: Vec<[f64; 3]> = o
        .held
        .iter()
        .map(|s| s.position)
        .filter(|&p| known.voxels.locate(p, snap).is_some_and(|l| !mask.0[l.voxel]))
        .collect();
    let (a, b) = (before.query_all(&points).unwrap(), after.query_all(&points).unwrap());
    let mae = a.iter().zip(&b).flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).abs())).sum::<f64>()
        / (3 * points.len()) as f64;
    outcome(
        kept && mae <= 1.0 / 255.0,
        format!(
            "{} of {} voxels masked; unmasked rows bit-equal: {kept}; unmasked color MAE {:.5} ({:.2}/255) over {} points",
            mask.count(),
            known.len(),
            mae,
            mae * 255.0,
            points.len()
        ),
    )
}

/// UV sphere squeezed into `u < 448/512` whose first longitude strip is repeated
/// right after the seam, shifted by exactly 448 texels.
fn seam_sphere(segments: usize) -> (Mesh, Vec<usize>) {
    let mut mesh = uv_sphere([0.0; 3], 0.5, segments, segments / 2, Material::default());
    let shift = 448.0 / 512.0;
    let mut uvs = mesh.face_uvs.take().unwrap();
    for tri in &mut uvs {
        for uv in tri.iter_mut() {
            uv[0] *= shift;
        }
    }
    let strip: Vec<usize> =
        (0..uvs.len()).filter(|&f| uvs[f].iter().all(|uv| uv[0] <= shift / segments as f64 + 1e-12)).collect();
    let mut copies = Vec::new();
    for &f in &strip {
        copies.push(mesh.faces.len());
        mesh.faces.push(mesh.faces[f]);
        mesh.face_material.push(mesh.face_material[f]);
        uvs.push(uvs[f].map(|uv| [uv[0] + shift, uv[1]]));
    }
    mesh.face_uvs = Some(uvs);
    let mut twin = vec![usize::MAX; mesh.faces.len()];
    for (&f, &c) in strip.iter().zip(&copies) {
        twin[f] = c;
    }
    (mesh, twin)
}

fn seam_continuity(ctx: &Ctx) -> Outcome {
    let o = ctx.overfit();
    let latent = o.vae.encode(&o.train, R, 0, false).unwrap();
    let field = o.vae.color_field(&latent).unwrap();
    let (mesh, twin) = seam_sphere(64);
    let size = 512;
    let opts = BakeOptions {
        width: size,
        height: size,
        supersamples: 8,
        seed: 9,
        pattern: SubsamplePattern::Shared,
        dilation: 2,
    };
    let t0 = Instant::now();
    let tex = bake_uv(&mesh, &field, &opts).unwrap().texture;
    let secs = t0.elapsed().as_secs_f64();
    let owner = rasterize_uv(&mesh, size, size).unwrap();
    let (mut pairs, mut worst) = (0, 0.0f64);
    for y in 0..size {
        for x in 0..size - 448 {
            let (Some(f), Some(g)) = (owner[y * size + x], owner[y * size + x + 448]) else { continue };
            if twin[f as usize] != g as usize || !tex.covered(x, y) || !tex.covered(x + 448, y) {
                continue;
            }
            pairs += 1;
            let (a, b) = (tex.get(x, y), tex.get(x + 448, y));
            worst = worst.max((0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max));
        }
    }
    outcome(
        pairs > 0 && worst <= 2.0 / 255.0 && secs < 60.0,
        format!("{pairs} coincident texel pairs, max difference {:.3}/255, bake {secs:.1}s at {size}x{size}", worst * 255.0),
    )
}

fn curation(_: &Ctx) -> Outcome {
    let tri = || {
        let mut m = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]], Material::default()).unwrap();
        m.materials[0].base_color = [0.0; 3];
        m
    };
    let mut glow = tri();
    glow.materials[0].emission = [0.9, 0.1, 0.1];
    let replaced = canonicalize_materials(&glow).color_at(0, [1.0, 0.0, 0.0]) == [0.9, 0.1, 0.1];

    let mut partial = tri();
    partial.materials[0].base_color = [0.5; 3];
    partial.materials[0].emission = [0.5; 3];
    let reinhard = canonicalize_materials(&partial).color_at(0, [0.2, 0.3, 0.5]) == [0.5; 3];

    let body = uv_sphere([0.0; 3], 1.0, 24, 12, Material::constant("body", [0.5; 3]));
    let shell = uv_sphere([0.0; 3], 1.05, 24, 12, Material::constant("outline", [0.0; 3])).flipped();
    let mut both = body.clone();
    both.append(&shell);
    let (_, means) = component_alignment(&both);
    let filtered = filter_outline_shells(&both).unwrap();
    let shell_removed = means.len() == 2 && filtered.faces.len() == body.faces.len() && filtered.positions.len() <= body.positions.len();
    outcome(
        replaced && reinhard && shell_removed,
        format!("emissive replacement {replaced}, reinhard composite {reinhard}, inverted shell removed {shell_removed}"),
    )
}

const PIPELINE_CONFIG: &str = r#"
resolution = 32
vae_density = 50000
flow_density = 50000

[train_vae]
steps = 500

[bake]
width = 256
height = 256
supersamples = 4
"#;

fn run_pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    std::fs::write(dir.join("config.toml"), PIPELINE_CONFIG).unwrap();
    let mut mesh = uv_sphere([0.0; 3], 0.5, 32, 16, Material { vertex_colors: true, ..Material::default() });
    mesh.vertex_colors = Some(
        mesh.positions.iter().map(|p| if (p[0] * 6.0).sin() * (p[2] * 6.0).cos() > 0.0 { RED } else { BLUE }).collect(),
    );
    write_obj(dir.join("ball.obj"), &mesh).unwrap();
    let steps: [&[&str]; 4] = [
        &["sample", "--mesh", "ball.obj"],
        &["train-vae", "--mesh", "ball.obj"],
        &["encode", "--vae", "ckpt/vae.ckpt", "--mesh", "ball.obj"],
        &["bake", "--vae", "ckpt/vae.ckpt", "--mesh", "ball.obj"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_texfield"))
            .current_dir(dir)
            .args(["--config", "config.toml", "--seed", "7", "--outputs", "out", "--cache", "cache", "--checkpoints", "ckpt"])
            .args(args)
            .env_remove("TEXFIELD_CACHE_DIR")
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files = Vec::new();
    for sub in ["out", "ckpt"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            files.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap()));
        }
    }
    files
}

fn determinism(_: &Ctx) -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let t0 = Instant::now();
    let first = run_pipeline(a.path());
    let second = run_pipeline(b.path());
    let secs = t0.elapsed().as_secs_f64();
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    let same_names = names == second.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>();
    let differing: Vec<&str> =
        first.iter().zip(&second).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    let manifests = names.iter().filter(|n| n.ends_with(".jsonl")).count();
    outcome(
        same_names && differing.is_empty() && manifests == 4,
        format!("{} files ({manifests} manifests) compared, differing {differing:?}, two runs {secs:.0}s", names.len()),
    )
}

type Check = fn(&Ctx) -> Outcome;

const CRITERIA: [(usize, &str, Check); 11] = [
    (1, "gradient correctness", gradients),
    (2, "attention oracle equivalence", attention_oracles),
    (3, "trilinear exactness", trilinear_exactness),
    (4, "single-asset VAE overfit", overfit),
    (5, "density monotonicity", density),
    (6, "geometry-latent factorization", factorization),
    (7, "flow sanity", flow_sanity),
    (8, "repaint preservation", repaint_preservation),
    (9, "seam continuity", seam_continuity),
    (10, "curation suite", curation),
    (11, "end-to-end determinism", determinism),
];

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ctx = Ctx::default();
    let (mut run, mut passed) = (0, 0);
    for (id, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&ctx)));
        let secs = t0.elapsed().as_secs_f64();
        let o = result.unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        run += 1;
        passed += usize::from(o.pass);
        println!("{} [{id:>2}] {name}: {} ({secs:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {passed}/{run} criteria passed");
}
