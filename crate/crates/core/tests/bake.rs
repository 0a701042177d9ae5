use proptest::prelude::*;
use texfield::bake::{bake_uv, point_psnr, rasterize_uv, splat_render, BakeOptions, FnField, SplatAxis, SubsamplePattern};
use texfield::geometry::shapes::quad;
use texfield::geometry::{Material, Mesh};

const A: [f64; 3] = [0.9, 0.2, 0.1];
const B: [f64; 3] = [0.1, 0.3, 0.8];

fn checker(p: [f64; 3]) -> Option<[f64; 3]> {
    let i = ((p[0] + 0.5) * 8.0).floor() as i64 + ((p[1] + 0.5) * 8.0).floor() as i64;
    Some(if i % 2 == 0 { A } else { B })
}

fn linear(p: [f64; 3]) -> Option<[f64; 3]> {
    Some([p[0] + 0.5, p[1] + 0.5, 0.25 * (p[0] - p[1]) + 0.5])
}

fn opts(size: usize, s: usize) -> BakeOptions {
    BakeOptions { width: size, height: size, supersamples: s, ..BakeOptions::default() }
}

/// Object-space rectangle of texel (x, y) on the unit quad.
fn texel_rect(x: usize, y: usize, n: usize) -> ([f64; 2], [f64; 2]) {
    let n = n as f64;
    let (x, y) = (x as f64, y as f64);
    ([x / n - 0.5, 1.0 - (y + 1.0) / n - 0.5], [(x + 1.0) / n - 0.5, 1.0 - y / n - 0.5])
}

#[test]
fn linear_field_texels_stay_within_their_footprint() {
    let mesh = quad(Material::default());
    let n = 24;
    let tex = bake_uv(&mesh, &FnField(linear), &opts(n, 8)).unwrap().texture;
    for y in 0..n {
        for x in 0..n {
            let (lo, hi) = texel_rect(x, y, n);
            let corners = [[lo[0], lo[1], 0.0], [hi[0], lo[1], 0.0], [lo[0], hi[1], 0.0], [hi[0], hi[1], 0.0]];
            let vals: Vec<[f64; 3]> = corners.iter().map(|&c| linear(c).unwrap()).collect();
            for c in 0..3 {
                let min = vals.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                let max = vals.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                let got = tex.get(x, y)[c];
                assert!(got >= min - 1e-12 && got <= max + 1e-12, "texel ({x},{y}) channel {c}");
            }
        }
    }
}

#[test]
fn baked_colors_lie_in_the_hull_of_field_values() {
    let mesh = quad(Material::default());
    let tex = bake_uv(&mesh, &FnField(checker), &opts(20, 8)).unwrap().texture;
    for c in &tex.rgb {
        // every mixture of A and B has the same weight on all three channels
        let w = (c[0] - B[0]) / (A[0] - B[0]);
        assert!((-1e-12..=1.0 + 1e-12).contains(&w));
        for ch in 0..3 {
            assert!((c[ch] - (w * A[ch] + (1.0 - w) * B[ch])).abs() < 1e-12);
        }
    }
}

#[test]
fn more_supersamples_track_the_box_filter() {
    let mesh = quad(Material::default());
    let n = 20;
    let dense = 32;
    let reference: Vec<[f64; 3]> = (0..n * n)
        .map(|i| {
            let (x, y) = (i % n, i / n);
            let (lo, hi) = texel_rect(x, y, n);
            let mut acc = [0.0; 3];
            for a in 0..dense {
                for b in 0..dense {
                    let px = lo[0] + (a as f64 + 0.5) / dense as f64 * (hi[0] - lo[0]);
                    let py = lo[1] + (b as f64 + 0.5) / dense as f64 * (hi[1] - lo[1]);
                    let c = checker([px, py, 0.0]).unwrap();
                    for k in 0..3 {
                        acc[k] += c[k] / (dense * dense) as f64;
                    }
                }
            }
            acc
        })
        .collect();
    let err = |s| {
        let tex = bake_uv(&mesh, &FnField(checker), &opts(n, s)).unwrap().texture;
        point_psnr(&tex.rgb, &reference).unwrap().mse_total
    };
    let (e1, e16) = (err(1), err(16));
    assert!(e16 < 0.5 * e1, "{e1} vs {e16}");
    let single = bake_uv(&mesh, &FnField(checker), &opts(n, 1)).unwrap().texture;
    assert!(single.rgb.iter().all(|&c| c == A || c == B));
}

#[test]
fn baking_is_seeded() {
    let mesh = quad(Material::default());
    let a = bake_uv(&mesh, &FnField(checker), &opts(20, 4)).unwrap().texture;
    assert_eq!(a, bake_uv(&mesh, &FnField(checker), &opts(20, 4)).unwrap().texture);
    let other = BakeOptions { seed: 1, ..opts(20, 4) };
    assert_ne!(a, bake_uv(&mesh, &FnField(checker), &other).unwrap().texture);
    let shared = BakeOptions { pattern: SubsamplePattern::Shared, ..opts(20, 4) };
    assert_ne!(a, bake_uv(&mesh, &FnField(checker), &shared).unwrap().texture);
}

#[test]
fn texels_on_both_sides_of_a_uv_seam_agree() {
    let mut mesh = quad(Material::default());
    mesh.face_uvs = Some(vec![
        [[0.05, 0.05], [0.45, 0.05], [0.45, 0.45]],
        [[0.55, 0.05], [0.95, 0.45], [0.55, 0.45]],
    ]);
    let n = 128;
    let tex = bake_uv(&mesh, &FnField(linear), &opts(n, 8)).unwrap().texture;
    let texel = |u: f64, v: f64| ((u * n as f64) as usize, ((1.0 - v) * n as f64) as usize);
    for k in 1..20 {
        let s = k as f64 / 20.0;
        let (x0, y0) = texel(0.05 + 0.4 * s, 0.05 + 0.4 * s);
        let (x1, y1) = texel(0.55 + 0.4 * s, 0.05 + 0.4 * s);
        let (a, b) = (tex.get(x0, y0), tex.get(x1, y1));
        // one texel spans 0.0625 in object space
        assert!((0..3).all(|c| (a[c] - b[c]).abs() < 0.1), "{s}: {a:?} {b:?}");
    }
    let owner = rasterize_uv(&mesh, n, n).unwrap();
    assert!(owner.contains(&Some(0)) && owner.contains(&Some(1)));
    assert!(owner[0].is_none());
}

#[test]
fn outside_field_leaves_texels_unresolved() {
    let mesh = quad(Material::default());
    let out = bake_uv(&mesh, &FnField(|p: [f64; 3]| (p[0] < 0.0).then_some([1.0; 3])), &opts(16, 4)).unwrap();
    assert!(out.unresolved > 0);
    assert!(!out.texture.covered(15, 8));
    assert!(out.texture.covered(0, 8));
}

#[test]
fn disk_splat_has_expected_diameter() {
    let mut pts = Vec::new();
    let step = 0.002;
    let r = 0.25;
    let m = (r / step) as i64;
    for i in -m..=m {
        for j in -m..=m {
            let (x, y) = (i as f64 * step, j as f64 * step);
            if x * x + y * y <= r * r {
                pts.push([x, y, 0.0]);
            }
        }
    }
    let cols = vec![[1.0; 3]; pts.len()];
    let size = 100;
    let img = splat_render(&pts, &cols, SplatAxis::PosZ, size).unwrap();
    let row: usize = (0..size).filter(|&x| img.get(x, size / 2).is_some()).count();
    assert!((49..=51).contains(&row), "{row}");
    // every pixel the disk touches is lit, so the count sits between radius 25 and 26 pixels
    let count = img.opaque_count() as f64;
    let pi = std::f64::consts::PI;
    assert!(count > pi * 25.0 * 25.0 && count < pi * 26.0 * 26.0, "{count}");
    let side = splat_render(&pts, &cols, SplatAxis::PosX, size).unwrap();
    assert!(side.opaque_count() <= size);
}

fn colors() -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(0.0..1.0f64), 1..40)
}

proptest! {
    #[test]
    fn psnr_is_symmetric_and_shift_consistent(a in colors(), shift in 0.01..0.5f64) {
        let b: Vec<[f64; 3]> = a.iter().map(|c| c.map(|x| x + shift)).collect();
        let ab = point_psnr(&a, &b).unwrap();
        let ba = point_psnr(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((ab.psnr - 10.0 * (1.0 / (shift * shift)).log10()).abs() < 1e-9);
    }

    #[test]
    fn triangle_texels_belong_to_their_owner(u in 0.0..0.5f64, v in 0.0..0.5f64, du in 0.1..0.5f64, dv in 0.1..0.5f64) {
        let mut mesh = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]], Material::default()).unwrap();
        let tri = [[u, v], [u + du, v], [u, v + dv]];
        mesh.face_uvs = Some(vec![tri]);
        let n = 32;
        let owner = rasterize_uv(&mesh, n, n).unwrap();
        for y in 0..n {
            for x in 0..n {
                let (cu, cv) = ((x as f64 + 0.5) / n as f64, 1.0 - (y as f64 + 0.5) / n as f64);
                let a = (cu - u) / du;
                let b = (cv - v) / dv;
                let inside = a >= 1e-9 && b >= 1e-9 && a + b <= 1.0 - 1e-9;
                let outside = a < -1e-9 || b < -1e-9 || a + b > 1.0 + 1e-9;
                if inside { prop_assert_eq!(owner[y * n + x], Some(0)); }
                if outside { prop_assert_eq!(owner[y * n + x], None); }
            }
        }
    }
}
