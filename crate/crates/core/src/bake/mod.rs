//! UV texture baking of a 3D color field, point-splat rendering and point-space PSNR.

mod splat;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use splat::{splat_render, SplatAxis, SplatImage};

use crate::error::{Error, Result};
use crate::geometry::Mesh;
use crate::nnkit::Scalar;
use crate::seed;
use crate::vae::ColorField;

/// A color function of 3D position; `None` where undefined.
pub trait ColorQuery {
    fn query(&self, points: &[[f64; 3]]) -> Vec<Option<[f64; 3]>>;
}

impl<T: Scalar> ColorQuery for ColorField<'_, T> {
    fn query(&self, points: &[[f64; 3]]) -> Vec<Option<[f64; 3]>> {
        ColorField::query(self, points)
    }
}

/// Wraps a closure as a [`ColorQuery`].
pub struct FnField<F>(pub F);

impl<F: Fn([f64; 3]) -> Option<[f64; 3]>> ColorQuery for FnField<F> {
    fn query(&self, points: &[[f64; 3]]) -> Vec<Option<[f64; 3]>> {
        points.iter().map(|&p| (self.0)(p)).collect()
    }
}

/// Baked texels with a coverage mask; row 0 is the top of the image (`v = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct UVTexture {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub coverage: Vec<bool>,
}

impl UVTexture {
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.rgb[y * self.width + x]
    }

    pub fn covered(&self, x: usize, y: usize) -> bool {
        self.coverage[y * self.width + x]
    }

    /// 8-bit RGBA bytes with coverage in alpha; `v_flip` puts `v = 0` on the first row.
    pub fn to_rgba8(&self, v_flip: bool) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height * 4);
        for row in 0..self.height {
            let y = if v_flip { self.height - 1 - row } else { row };
            for x in 0..self.width {
                let c = self.get(x, y);
                out.extend(c.map(to_u8));
                out.push(if self.covered(x, y) { 255 } else { 0 });
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path, v_flip: bool) -> Result<()> {
        image::save_buffer(path, &self.to_rgba8(v_flip), self.width as u32, self.height as u32, image::ColorType::Rgba8)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

pub(crate) fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Placement of supersample positions inside each texel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsamplePattern {
    /// Independent seeded offsets per texel.
    #[default]
    PerTexel,
    /// The same seeded offsets in every texel.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BakeOptions {
    pub width: usize,
    pub height: usize,
    pub supersamples: usize,
    pub seed: u64,
    pub pattern: SubsamplePattern,
    /// Rings of uncovered texels filled from covered neighbors.
    pub dilation: usize,
}

impl Default for BakeOptions {
    fn default() -> Self {
        Self { width: 512, height: 512, supersamples: 8, seed: 0, pattern: SubsamplePattern::PerTexel, dilation: 2 }
    }
}

/// Bake output plus the number of covered texels whose samples all fell outside the field.
#[derive(Clone, Debug)]
pub struct BakeResult {
    pub texture: UVTexture,
    pub unresolved: usize,
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Barycentric coordinates of `p` in triangle `t` (unnormalized area check by caller).
fn barycentric(t: &[[f64; 2]; 3], p: [f64; 2]) -> Option<[f64; 3]> {
    let area = edge(t[0], t[1], t[2]);
    if area.abs() < 1e-18 {
        return None;
    }
    Some([edge(t[1], t[2], p) / area, edge(t[2], t[0], p) / area, edge(t[0], t[1], p) / area])
}

/// Texel-center UV of texel `(x, y)`.
fn texel_uv(x: f64, y: f64, w: usize, h: usize) -> [f64; 2] {
    [x / w as f64, 1.0 - y / h as f64]
}

/// Owner face of every texel whose center lies inside a UV triangle (lowest face index wins).
pub fn rasterize_uv(mesh: &Mesh, width: usize, height: usize) -> Result<Vec<Option<u32>>> {
    let uvs = mesh.face_uvs.as_ref().ok_or_else(|| Error::InvalidArgument("mesh has no UV coordinates".into()))?;
    let mut owner = vec![None; width * height];
    for (f, tri) in uvs.iter().enumerate() {
        let xs = tri.map(|c| c[0] * width as f64);
        let ys = tri.map(|c| (1.0 - c[1]) * height as f64);
        let x0 = (xs.iter().cloned().fold(f64::INFINITY, f64::min) - 0.5).floor().max(0.0) as usize;
        let x1 = (xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 0.5).ceil().min(width as f64 - 1.0);
        let y0 = (ys.iter().cloned().fold(f64::INFINITY, f64::min) - 0.5).floor().max(0.0) as usize;
        let y1 = (ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 0.5).ceil().min(height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                if owner[y * width + x].is_some() {
                    continue;
                }
                let p = texel_uv(x as f64 + 0.5, y as f64 + 0.5, width, height);
                if let Some(b) = barycentric(tri, p) {
                    if b.iter().all(|&w| w >= -1e-12) {
                        owner[y * width + x] = Some(f as u32);
                    }
                }
            }
        }
    }
    Ok(owner)
}

/// Barycentric coordinates clamped onto the triangle.
fn clamp_bary(b: [f64; 3]) -> [f64; 3] {
    let c = b.map(|w| w.max(0.0));
    let s: f64 = c.iter().sum();
    if s > 0.0 {
        c.map(|w| w / s)
    } else {
        [1.0 / 3.0; 3]
    }
}

/// Evaluates `field` at the surface points behind each texel and averages `S` sub-samples.
///
/// Sub-sample positions inside the texel footprint map to the surface through the texel's
/// owner triangle. Uncovered texels are filled by `dilation` rings of neighbor averaging
/// and keep `coverage = false`.
pub fn bake_uv(mesh: &Mesh, field: &dyn ColorQuery, opts: &BakeOptions) -> Result<BakeResult> {
    let (w, h) = (opts.width, opts.height);
    if w == 0 || h == 0 || opts.supersamples == 0 {
        return Err(Error::InvalidArgument("bake size and supersample count must be positive".into()));
    }
    let owner = rasterize_uv(mesh, w, h)?;
    let uvs = mesh.face_uvs.as_ref().expect("checked by rasterize_uv");
    let s = opts.supersamples;
    let shared: Vec<[f64; 2]> = {
        let mut rng = seed::rng(opts.seed, "bake-shared", 0);
        (0..s).map(|_| [rng.gen(), rng.gen()]).collect()
    };

    let mut texels = Vec::new();
    let mut points = Vec::new();
    for y in 0..h {
        let mut rng = seed::rng(opts.seed, "bake-row", y as u64);
        for x in 0..w {
            let Some(f) = owner[y * w + x] else { continue };
            let f = f as usize;
            texels.push(y * w + x);
            let corners = mesh.corners(f);
            for k in 0..s {
                let o = match opts.pattern {
                    SubsamplePattern::Shared => shared[k],
                    SubsamplePattern::PerTexel => [rng.gen(), rng.gen()],
                };
                let p = texel_uv(x as f64 + o[0], y as f64 + o[1], w, h);
                let b = clamp_bary(barycentric(&uvs[f], p).unwrap_or([1.0 / 3.0; 3]));
                points.push([0, 1, 2].map(|a| b[0] * corners[0][a] + b[1] * corners[1][a] + b[2] * corners[2][a]));
            }
        }
    }

    let colors = field.query(&points);
    let mut rgb = vec![[0.0; 3]; w * h];
    let mut coverage = vec![false; w * h];
    let mut unresolved = 0;
    for (n, &t) in texels.iter().enumerate() {
        let mut acc = [0.0; 3];
        let mut count = 0;
        for c in colors[n * s..(n + 1) * s].iter().flatten() {
            for a in 0..3 {
                acc[a] += c[a];
            }
            count += 1;
        }
        if count == 0 {
            unresolved += 1;
            continue;
        }
        rgb[t] = acc.map(|v| (v / count as f64).clamp(0.0, 1.0));
        coverage[t] = true;
    }
    let mut texture = UVTexture { width: w, height: h, rgb, coverage };
    dilate(&mut texture, opts.dilation);
    Ok(BakeResult { texture, unresolved })
}

/// Fills uncovered texels ring by ring with the mean of their already-filled 8-neighbors.
pub fn dilate(tex: &mut UVTexture, rings: usize) {
    let (w, h) = (tex.width, tex.height);
    let mut filled = tex.coverage.clone();
    for _ in 0..rings {
        let mut next = filled.clone();
        let mut rgb = tex.rgb.clone();
        for y in 0..h {
            for x in 0..w {
                if filled[y * w + x] {
                    continue;
                }
                let mut acc = [0.0; 3];
                let mut n = 0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let i = ny as usize * w + nx as usize;
                        if filled[i] {
                            for a in 0..3 {
                                acc[a] += tex.rgb[i][a];
                            }
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    rgb[y * w + x] = acc.map(|v| v / n as f64);
                    next[y * w + x] = true;
                }
            }
        }
        tex.rgb = rgb;
        filled = next;
    }
}

/// Point-space reconstruction quality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrReport {
    pub mse: [f64; 3],
    pub mse_total: f64,
    pub psnr: f64,
    pub count: usize,
}

/// PSNR cap reported when the error is below `1e-10`.
pub const PSNR_CAP: f64 = 99.0;

/// Per-channel and total MSE with `psnr = 10·log10(1 / mse_total)`, capped at 99 dB.
pub fn point_psnr(pred: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<PsnrReport> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!("{} predictions for {} references", pred.len(), reference.len())));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("PSNR needs at least one point".into()));
    }
    let mut mse = [0.0; 3];
    for (p, r) in pred.iter().zip(reference) {
        for c in 0..3 {
            mse[c] += (p[c] - r[c]) * (p[c] - r[c]);
        }
    }
    let n = pred.len() as f64;
    let mse = mse.map(|m| m / n);
    let mse_total = (mse[0] + mse[1] + mse[2]) / 3.0;
    let psnr = if mse_total < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / mse_total).log10()).min(PSNR_CAP) };
    Ok(PsnrReport { mse, mse_total, psnr, count: pred.len() })
}
