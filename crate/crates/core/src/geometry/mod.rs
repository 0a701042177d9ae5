//! Mesh ingestion, curation, normalization and area-weighted colored surface sampling.

mod io;
pub mod shapes;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use io::{load_mesh, load_point_cloud, load_texture, read_ply_points, write_obj, write_ply_points};

/// A colored, oriented point on a mesh surface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub position: [f64; 3],
    pub normal: [f64; 3],
    pub color: [f64; 3],
}

/// Image texture addressed by UV with nearest-texel lookup.
///
/// Row 0 is the top of the image, so `v = 1` maps to row 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub width: usize,
    pub height: usize,
    pub texels: Vec<[f64; 3]>,
}

impl Texture {
    pub fn new(width: usize, height: usize, texels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || texels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "texture {width}x{height} needs {} texels, got {}",
                width * height,
                texels.len()
            )));
        }
        Ok(Self { width, height, texels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let texels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, texels }
    }

    pub fn nearest(&self, uv: [f64; 2]) -> [f64; 3] {
        let x = (uv[0] * self.width as f64).floor().clamp(0.0, (self.width - 1) as f64) as usize;
        let y = ((1.0 - uv[1]) * self.height as f64).floor().clamp(0.0, (self.height - 1) as f64) as usize;
        self.texels[y * self.width + x]
    }

    pub fn map_colors(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        Self { width: self.width, height: self.height, texels: self.texels.iter().map(|&c| f(c)).collect() }
    }
}

/// Post-processing applied to a material's base color by curation.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum ColorAdjust {
    #[default]
    None,
    /// Fully emissive: the emission color replaces the base color.
    Replace([f64; 3]),
    /// Partially emissive: `reinhard(base + emission)` per channel.
    AddReinhard([f64; 3]),
}

impl ColorAdjust {
    pub fn apply(self, base: [f64; 3]) -> [f64; 3] {
        match self {
            ColorAdjust::None => base,
            ColorAdjust::Replace(e) => e,
            ColorAdjust::AddReinhard(e) => [0, 1, 2].map(|i| reinhard(base[i] + e[i])),
        }
    }
}

/// Reinhard tone mapping `x / (1 + x)` for `x >= 0`.
pub fn reinhard(x: f64) -> f64 {
    let x = x.max(0.0);
    x / (1.0 + x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Material {
    pub name: String,
    pub base_color: [f64; 3],
    pub texture: Option<Arc<Texture>>,
    /// Use the mesh's per-vertex colors when no texture applies.
    pub vertex_colors: bool,
    pub emission: [f64; 3],
    pub emission_strength: f64,
    /// Flagged as an outline shell (backface-culled, inverted hull).
    pub outline: bool,
    pub adjust: ColorAdjust,
}

impl Default for Material {
    fn default() -> Self {
        Self {
            name: "default".into(),
            base_color: [0.8, 0.8, 0.8],
            texture: None,
            vertex_colors: false,
            emission: [0.0; 3],
            emission_strength: 1.0,
            outline: false,
            adjust: ColorAdjust::None,
        }
    }
}

impl Material {
    pub fn constant(name: &str, color: [f64; 3]) -> Self {
        Self { name: name.into(), base_color: color, ..Self::default() }
    }

    pub fn effective_emission(&self) -> [f64; 3] {
        self.emission.map(|e| (e * self.emission_strength).max(0.0))
    }

    pub fn is_emissive(&self) -> bool {
        self.effective_emission().iter().any(|&e| e > 0.0)
    }
}

/// Triangle mesh with per-face materials and optional per-corner UVs.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub positions: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub face_material: Vec<u32>,
    pub materials: Vec<Material>,
    pub vertex_colors: Option<Vec<[f64; 3]>>,
    pub face_uvs: Option<Vec<[[f64; 2]; 3]>>,
}

impl Mesh {
    /// Mesh with one material; validates face indices.
    pub fn new(positions: Vec<[f64; 3]>, faces: Vec<[u32; 3]>, material: Material) -> Result<Self> {
        let n = faces.len();
        let mesh = Self {
            positions,
            faces,
            face_material: vec![0; n],
            materials: vec![material],
            vertex_colors: None,
            face_uvs: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        for (f, face) in self.faces.iter().enumerate() {
            for &i in face {
                if i as usize >= self.positions.len() {
                    return Err(Error::FaceIndex { face: f, index: i as usize, count: self.positions.len() });
                }
            }
        }
        if self.face_material.len() != self.faces.len() {
            return Err(Error::Shape("face_material length differs from face count".into()));
        }
        if let Some(&m) = self.face_material.iter().find(|&&m| m as usize >= self.materials.len()) {
            return Err(Error::Parse(format!("material id {m} out of range")));
        }
        if let Some(vc) = &self.vertex_colors {
            if vc.len() != self.positions.len() {
                return Err(Error::Shape("vertex color count differs from vertex count".into()));
            }
        }
        if let Some(uv) = &self.face_uvs {
            if uv.len() != self.faces.len() {
                return Err(Error::Shape("face UV count differs from face count".into()));
            }
        }
        Ok(())
    }

    pub fn corners(&self, face: usize) -> [[f64; 3]; 3] {
        self.faces[face].map(|i| self.positions[i as usize])
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.corners(face);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    /// Unit geometric normal from the winding order; zero for degenerate faces.
    pub fn face_normal(&self, face: usize) -> [f64; 3] {
        let [a, b, c] = self.corners(face);
        normalize(cross(sub(b, a), sub(c, a))).unwrap_or([0.0; 3])
    }

    pub fn face_centroid(&self, face: usize) -> [f64; 3] {
        let [a, b, c] = self.corners(face);
        [0, 1, 2].map(|i| (a[i] + b[i] + c[i]) / 3.0)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.positions.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }

    /// Color at a point given by face and barycentric weights.
    ///
    /// Precedence: texture (nearest texel) over vertex colors over the material constant.
    pub fn color_at(&self, face: usize, bary: [f64; 3]) -> [f64; 3] {
        let mat = &self.materials[self.face_material[face] as usize];
        let base = match (&mat.texture, &self.face_uvs) {
            (Some(tex), Some(uvs)) => {
                let uv = uvs[face];
                let u = bary[0] * uv[0][0] + bary[1] * uv[1][0] + bary[2] * uv[2][0];
                let v = bary[0] * uv[0][1] + bary[1] * uv[1][1] + bary[2] * uv[2][1];
                tex.nearest([u, v])
            }
            _ => match (&self.vertex_colors, mat.vertex_colors) {
                (Some(vc), true) => {
                    let f = self.faces[face];
                    [0, 1, 2].map(|i| {
                        bary[0] * vc[f[0] as usize][i] + bary[1] * vc[f[1] as usize][i] + bary[2] * vc[f[2] as usize][i]
                    })
                }
                _ => mat.base_color,
            },
        };
        mat.adjust.apply(base).map(|c| c.clamp(0.0, 1.0))
    }

    /// Color at a vertex, looked up through the first face that uses it.
    pub fn vertex_color(&self, vertex: usize) -> Option<[f64; 3]> {
        for (f, face) in self.faces.iter().enumerate() {
            if let Some(corner) = face.iter().position(|&i| i as usize == vertex) {
                let mut bary = [0.0; 3];
                bary[corner] = 1.0;
                return Some(self.color_at(f, bary));
            }
        }
        None
    }

    /// Keeps only the listed faces and drops unreferenced vertices.
    pub fn retain_faces(&self, keep: &[bool]) -> Self {
        let mut remap = vec![u32::MAX; self.positions.len()];
        let mut positions = Vec::new();
        let mut colors = self.vertex_colors.as_ref().map(|_| Vec::new());
        let mut faces = Vec::new();
        let mut face_material = Vec::new();
        let mut uvs = self.face_uvs.as_ref().map(|_| Vec::new());
        for (f, face) in self.faces.iter().enumerate() {
            if !keep[f] {
                continue;
            }
            let nf = face.map(|i| {
                let i = i as usize;
                if remap[i] == u32::MAX {
                    remap[i] = positions.len() as u32;
                    positions.push(self.positions[i]);
                    if let (Some(out), Some(src)) = (colors.as_mut(), &self.vertex_colors) {
                        out.push(src[i]);
                    }
                }
                remap[i]
            });
            faces.push(nf);
            face_material.push(self.face_material[f]);
            if let (Some(out), Some(src)) = (uvs.as_mut(), &self.face_uvs) {
                out.push(src[f]);
            }
        }
        Self {
            positions,
            faces,
            face_material,
            materials: self.materials.clone(),
            vertex_colors: colors,
            face_uvs: uvs,
        }
    }

    /// Appends another mesh, offsetting its indices and materials.
    pub fn append(&mut self, other: &Mesh) {
        let vbase = self.positions.len() as u32;
        let mbase = self.materials.len() as u32;
        match (&mut self.vertex_colors, &other.vertex_colors) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (Some(a), None) => a.extend(std::iter::repeat_n([1.0; 3], other.positions.len())),
            (None, Some(b)) => {
                let mut a = vec![[1.0; 3]; self.positions.len()];
                a.extend_from_slice(b);
                self.vertex_colors = Some(a);
            }
            (None, None) => {}
        }
        match (&mut self.face_uvs, &other.face_uvs) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (Some(a), None) => a.extend(std::iter::repeat_n([[0.0; 2]; 3], other.faces.len())),
            (None, Some(b)) => {
                let mut a = vec![[[0.0; 2]; 3]; self.faces.len()];
                a.extend_from_slice(b);
                self.face_uvs = Some(a);
            }
            (None, None) => {}
        }
        self.positions.extend_from_slice(&other.positions);
        self.faces.extend(other.faces.iter().map(|f| f.map(|i| i + vbase)));
        self.face_material.extend(other.face_material.iter().map(|m| m + mbase));
        self.materials.extend(other.materials.iter().cloned());
    }

    /// Reverses the winding of every face (flips geometric normals).
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for f in &mut out.faces {
            f.swap(1, 2);
        }
        if let Some(uvs) = &mut out.face_uvs {
            for uv in uvs {
                uv.swap(1, 2);
            }
        }
        out
    }
}

/// Centers the bounding box at the origin and scales the longest axis to 1.
pub fn normalize_mesh(mesh: &Mesh) -> Result<Mesh> {
    let (lo, hi) = mesh
        .bounds()
        .ok_or_else(|| Error::Degenerate("mesh has no vertices".into()))?;
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if !(extent > 1e-12) {
        return Err(Error::Degenerate("mesh has zero extent on every axis".into()));
    }
    let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
    let mut out = mesh.clone();
    for p in &mut out.positions {
        for a in 0..3 {
            p[a] = ((p[a] - center[a]) / extent).clamp(-0.5, 0.5);
        }
    }
    Ok(out)
}

/// Resolves emissive materials into plain base colors in `[0,1]`.
///
/// Fully emissive materials (constant black base) take the emission color; partially
/// emissive ones add emission to the base and tone-map with Reinhard.
pub fn canonicalize_materials(mesh: &Mesh) -> Mesh {
    let mut out = mesh.clone();
    for m in &mut out.materials {
        if !m.is_emissive() {
            continue;
        }
        let e = m.effective_emission();
        let black_base =
            m.texture.is_none() && !(m.vertex_colors && mesh.vertex_colors.is_some()) && m.base_color == [0.0; 3];
        m.adjust = if black_base {
            ColorAdjust::Replace(e.map(|c| c.clamp(0.0, 1.0)))
        } else {
            ColorAdjust::AddReinhard(e)
        };
        m.emission = [0.0; 3];
    }
    out
}

/// Mean outward alignment below which a connected component is treated as an inverted shell.
pub const SHELL_THRESHOLD: f64 = -0.5;

/// Per-component area-weighted mean of `normal · outward`, where outward points from the
/// mesh's area centroid to the face centroid. Returns the component id per face and the means.
pub fn component_alignment(mesh: &Mesh) -> (Vec<usize>, Vec<f64>) {
    let n = mesh.positions.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for f in &mesh.faces {
        let a = find(&mut parent, f[0] as usize);
        for &v in &f[1..] {
            let b = find(&mut parent, v as usize);
            if a != b {
                parent[b] = a;
            }
        }
    }
    let mut roots = std::collections::BTreeMap::new();
    let face_comp: Vec<usize> = mesh
        .faces
        .iter()
        .map(|f| {
            let r = find(&mut parent, f[0] as usize);
            let next = roots.len();
            *roots.entry(r).or_insert(next)
        })
        .collect();

    let total = mesh.total_area();
    let mut centroid = [0.0; 3];
    for f in 0..mesh.faces.len() {
        let (a, c) = (mesh.face_area(f), mesh.face_centroid(f));
        for i in 0..3 {
            centroid[i] += a * c[i];
        }
    }
    if total > 0.0 {
        centroid = centroid.map(|c| c / total);
    }
    let mut sum = vec![0.0; roots.len()];
    let mut weight = vec![0.0; roots.len()];
    for f in 0..mesh.faces.len() {
        let area = mesh.face_area(f);
        let Some(dir) = normalize(sub(mesh.face_centroid(f), centroid)) else { continue };
        if area <= 0.0 {
            continue;
        }
        sum[face_comp[f]] += area * dot(mesh.face_normal(f), dir);
        weight[face_comp[f]] += area;
    }
    let means = sum.iter().zip(&weight).map(|(s, w)| if *w > 0.0 { s / w } else { 0.0 }).collect();
    (face_comp, means)
}

/// Removes inward-facing shell components and faces with outline-flagged materials.
pub fn filter_outline_shells(mesh: &Mesh) -> Result<Mesh> {
    let (comp, means) = component_alignment(mesh);
    let keep: Vec<bool> = (0..mesh.faces.len())
        .map(|f| means[comp[f]] >= SHELL_THRESHOLD && !mesh.materials[mesh.face_material[f] as usize].outline)
        .collect();
    if !keep.iter().any(|&k| k) {
        return Err(Error::AllFacesRemoved);
    }
    if keep.iter().all(|&k| k) {
        return Ok(mesh.clone());
    }
    Ok(mesh.retain_faces(&keep))
}

/// Canonicalize materials, drop outline shells, then normalize.
pub fn curate(mesh: &Mesh) -> Result<Mesh> {
    let m = canonicalize_materials(mesh);
    let m = filter_outline_shells(&m)?;
    normalize_mesh(&m)
}

/// Area-weighted uniform surface samples; see [`sample_surface`].
pub fn sample_surface_with_faces(
    mesh: &Mesh,
    n_points: usize,
    seed: u64,
    monochrome: bool,
) -> Result<(Vec<SurfaceSample>, Vec<u32>)> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("n_points must be >= 1".into()));
    }
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::Degenerate("mesh has zero total area".into()));
    }
    let normals: Vec<[f64; 3]> = (0..mesh.faces.len()).map(|f| mesh.face_normal(f)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_points);
    let mut faces = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let u: f64 = rng.gen::<f64>() * acc;
        let f = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        let bary = [1.0 - s, s * (1.0 - r2), s * r2];
        let [a, b, c] = mesh.corners(f);
        let position = [0, 1, 2].map(|i| bary[0] * a[i] + bary[1] * b[i] + bary[2] * c[i]);
        let color = if monochrome { [1.0; 3] } else { mesh.color_at(f, bary) };
        samples.push(SurfaceSample { position, normal: normals[f], color });
        faces.push(f as u32);
    }
    Ok((samples, faces))
}

/// Draws `n_points` samples uniformly by area: face chosen proportionally to area, then a
/// uniform barycentric point. `monochrome` sets every color to white. Deterministic in `seed`.
pub fn sample_surface(mesh: &Mesh, n_points: usize, seed: u64, monochrome: bool) -> Result<Vec<SurfaceSample>> {
    sample_surface_with_faces(mesh, n_points, seed, monochrome).map(|(s, _)| s)
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm(a);
    if n > 1e-300 {
        Some(a.map(|x| x / n))
    } else {
        None
    }
}
