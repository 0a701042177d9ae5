//! Procedural meshes and textures used by tests, demos and the CLI.

use std::f64::consts::PI;
use std::sync::Arc;

use super::{Material, Mesh, Texture};

/// Latitude/longitude sphere around the z axis with outward winding.
///
/// The longitude seam at `u = 0 / 1` duplicates its vertices so each face gets
/// a proper UV triangle; `v = 1` is the north (+z) pole.
pub fn uv_sphere(center: [f64; 3], radius: f64, segments: usize, rings: usize, material: Material) -> Mesh {
    let (segments, rings) = (segments.max(3), rings.max(2));
    let mut positions = Vec::with_capacity((segments + 1) * (rings + 1));
    let mut uv = Vec::with_capacity(positions.capacity());
    for r in 0..=rings {
        let theta = PI * r as f64 / rings as f64;
        for s in 0..=segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            let dir = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
            positions.push([0, 1, 2].map(|i| center[i] + radius * dir[i]));
            uv.push([s as f64 / segments as f64, 1.0 - r as f64 / rings as f64]);
        }
    }
    let id = |r: usize, s: usize| (r * (segments + 1) + s) as u32;
    let mut faces = Vec::new();
    for r in 0..rings {
        for s in 0..segments {
            let (a, b, c, d) = (id(r, s), id(r + 1, s), id(r, s + 1), id(r + 1, s + 1));
            if r != 0 {
                faces.push([a, b, c]);
            }
            if r != rings - 1 {
                faces.push([b, d, c]);
            }
        }
    }
    let face_uvs = faces.iter().map(|f| f.map(|i| uv[i as usize])).collect();
    let n = faces.len();
    Mesh {
        positions,
        faces,
        face_material: vec![0; n],
        materials: vec![material],
        vertex_colors: None,
        face_uvs: Some(face_uvs),
    }
}

/// Axis-aligned box with 8 shared corners and outward winding.
///
/// Corner index bits are `x + 2y + 4z` (0 = low, 1 = high).
pub fn box_mesh(lo: [f64; 3], hi: [f64; 3], material: Material) -> Mesh {
    let positions = (0..8)
        .map(|i| [0, 1, 2].map(|a| if i >> a & 1 == 1 { hi[a] } else { lo[a] }))
        .collect();
    let faces = vec![
        [0, 4, 6],
        [0, 6, 2],
        [1, 3, 7],
        [1, 7, 5],
        [0, 1, 5],
        [0, 5, 4],
        [2, 6, 7],
        [2, 7, 3],
        [0, 2, 3],
        [0, 3, 1],
        [4, 5, 7],
        [4, 7, 6],
    ];
    Mesh::new(positions, faces, material).expect("box indices are valid")
}

/// Unit quad in the z=0 plane with UVs covering `[0,1]²`.
pub fn quad(material: Material) -> Mesh {
    let positions = vec![[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.5, 0.5, 0.0], [-0.5, 0.5, 0.0]];
    let mut m = Mesh::new(positions, vec![[0, 1, 2], [0, 2, 3]], material).expect("quad indices are valid");
    m.face_uvs = Some(vec![[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]], [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]]]);
    m
}

/// Checkerboard with `cells_u × cells_v` squares alternating between `a` and `b`.
pub fn checker_texture(width: usize, height: usize, cells_u: usize, cells_v: usize, a: [f64; 3], b: [f64; 3]) -> Texture {
    Texture::from_fn(width, height, |x, y| {
        let cu = x * cells_u / width;
        let cv = y * cells_v / height;
        if (cu + cv).is_multiple_of(2) {
            a
        } else {
            b
        }
    })
}

/// Sphere of radius 0.5 textured with a longitude/latitude checkerboard whose cell
/// borders coincide with mesh edges (`segments` and `rings` multiples of the cell counts).
pub fn checker_sphere(segments: usize, rings: usize, cells_u: usize, cells_v: usize, a: [f64; 3], b: [f64; 3]) -> Mesh {
    let tex = checker_texture(cells_u * 16, cells_v * 16, cells_u, cells_v, a, b);
    let material = Material { name: "checker".into(), texture: Some(Arc::new(tex)), ..Material::default() };
    uv_sphere([0.0; 3], 0.5, segments, rings, material)
}
