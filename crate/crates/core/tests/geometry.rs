use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use texfield::geometry::shapes::{box_mesh, uv_sphere};
use texfield::geometry::{
    canonicalize_materials, filter_outline_shells, load_mesh, load_point_cloud, normalize_mesh, sample_surface,
    sample_surface_with_faces, write_obj, write_ply_points, Material, Mesh,
};

fn triangle_pair(ratio: f64) -> Mesh {
    // Two disjoint right triangles with area ratio `ratio : 1`.
    let s = ratio.sqrt();
    Mesh::new(
        vec![[0.0, 0.0, 0.0], [s, 0.0, 0.0], [0.0, s, 0.0], [5.0, 0.0, 0.0], [6.0, 0.0, 0.0], [5.0, 1.0, 0.0]],
        vec![[0, 1, 2], [3, 4, 5]],
        Material::default(),
    )
    .unwrap()
}

#[test]
fn area_ratio_three_to_one_within_two_percent() {
    let (_, faces) = sample_surface_with_faces(&triangle_pair(3.0), 100_000, 11, false).unwrap();
    let first = faces.iter().filter(|&&f| f == 0).count() as f64;
    assert!((first - 75_000.0).abs() <= 0.02 * 75_000.0, "{first}");
    assert!(((100_000.0 - first) - 25_000.0).abs() <= 0.02 * 25_000.0);
}

#[test]
fn face_frequencies_pass_chi_square() {
    let mesh = uv_sphere([0.0; 3], 0.5, 12, 6, Material::default());
    let n = 100_000;
    let (_, faces) = sample_surface_with_faces(&mesh, n, 5, false).unwrap();
    let mut counts = vec![0usize; mesh.faces.len()];
    for f in faces {
        counts[f as usize] += 1;
    }
    let total = mesh.total_area();
    let stat: f64 = counts
        .iter()
        .enumerate()
        .map(|(f, &c)| {
            let e = n as f64 * mesh.face_area(f) / total;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((mesh.faces.len() - 1) as f64).unwrap();
    let p = 1.0 - dist.cdf(stat);
    assert!(p > 0.01, "chi-square {stat:.1} p {p:.4}");
}

#[test]
fn cube_vertex_colors_read_back_at_vertices() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cube.obj");
    let mut text = String::new();
    let colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [0.5, 0.5, 0.5], [0.1, 0.2, 0.3]];
    for (i, c) in colors.iter().enumerate() {
        let p = [(i >> 2) & 1, (i >> 1) & 1, i & 1].map(|b| b as f64);
        text += &format!("v {} {} {} {} {} {}\n", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    for f in ["1 2 4", "1 4 3", "5 7 8", "5 8 6", "1 5 6", "1 6 2", "3 4 8", "3 8 7", "1 3 7", "1 7 5", "2 6 8", "2 8 4"] {
        text += &format!("f {f}\n");
    }
    std::fs::write(&path, text).unwrap();
    let mesh = load_mesh(&path).unwrap();
    assert_eq!((mesh.positions.len(), mesh.faces.len()), (8, 12));
    for (f, face) in mesh.faces.iter().enumerate() {
        for (corner, &v) in face.iter().enumerate() {
            let mut bary = [0.0; 3];
            bary[corner] = 1.0;
            assert_eq!(mesh.color_at(f, bary), colors[v as usize]);
        }
    }
}

#[test]
fn obj_and_ply_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = normalize_mesh(&box_mesh([0.0; 3], [2.0, 1.0, 1.0], Material::constant("c", [0.2, 0.4, 0.6]))).unwrap();
    let obj = dir.path().join("box.obj");
    write_obj(&obj, &mesh).unwrap();
    let back = load_mesh(&obj).unwrap();
    assert_eq!(back.faces, mesh.faces);
    for (a, b) in back.positions.iter().zip(&mesh.positions) {
        assert!((0..3).all(|i| (a[i] - b[i]).abs() < 1e-9));
    }

    let samples = sample_surface(&mesh, 500, 3, false).unwrap();
    let ply = dir.path().join("cloud.ply");
    write_ply_points(&ply, &samples).unwrap();
    let read = load_point_cloud(&ply).unwrap();
    assert_eq!(read.len(), samples.len());
    for (a, b) in read.iter().zip(&samples) {
        assert!((0..3).all(|i| (a.position[i] - b.position[i]).abs() < 1e-6));
        assert!((0..3).all(|i| (a.normal[i] - b.normal[i]).abs() < 1e-6));
        assert!((0..3).all(|i| (a.color[i] - b.color[i]).abs() <= 0.5 / 255.0 + 1e-9));
    }
}

#[test]
fn unsupported_extension_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mesh.stl");
    std::fs::write(&path, "solid x").unwrap();
    assert!(matches!(load_mesh(&path), Err(texfield::Error::UnsupportedFormat(_))));
    assert!(matches!(load_mesh(dir.path().join("missing.obj")), Err(texfield::Error::Io { .. })));
}

fn arb_point() -> impl Strategy<Value = [f64; 3]> {
    [-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_bounds_fit_unit_cube(pts in prop::collection::vec(arb_point(), 3..30)) {
        let n = pts.len() as u32;
        let faces: Vec<[u32; 3]> = (0..n - 2).map(|i| [i, i + 1, i + 2]).collect();
        let mesh = Mesh::new(pts, faces, Material::default()).unwrap();
        if let Ok(m) = normalize_mesh(&mesh) {
            let (lo, hi) = m.bounds().unwrap();
            let ext: Vec<f64> = (0..3).map(|a| hi[a] - lo[a]).collect();
            let longest = ext.iter().cloned().fold(0.0, f64::max);
            prop_assert!((longest - 1.0).abs() < 1e-9);
            for a in 0..3 {
                prop_assert!(lo[a] >= -0.5 - 1e-12 && hi[a] <= 0.5 + 1e-12);
                prop_assert!((lo[a] + hi[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn canonical_colors_stay_in_unit_cube(
        base in [0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64],
        emission in [0.0..20.0f64, 0.0..20.0f64, 0.0..20.0f64],
        strength in 0.0..5.0f64,
    ) {
        let mat = Material { base_color: base, emission, emission_strength: strength, ..Material::default() };
        let emissive = mat.is_emissive();
        let mesh = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]], mat).unwrap();
        let out = canonicalize_materials(&mesh);
        let c = out.color_at(0, [1.0 / 3.0; 3]);
        prop_assert!(c.iter().all(|&x| (0.0..=1.0).contains(&x)), "{c:?}");
        if !emissive {
            prop_assert_eq!(c, base);
        }
    }

    #[test]
    fn sampling_is_deterministic_with_unit_normals(seed in any::<u64>(), n in 1usize..400, mono in any::<bool>()) {
        let mesh = uv_sphere([0.0; 3], 0.5, 8, 4, Material::constant("m", [0.3, 0.6, 0.9]));
        let a = sample_surface(&mesh, n, seed, mono).unwrap();
        let b = sample_surface(&mesh, n, seed, mono).unwrap();
        prop_assert_eq!(&a, &b);
        for s in &a {
            let len = (s.normal[0].powi(2) + s.normal[1].powi(2) + s.normal[2].powi(2)).sqrt();
            prop_assert!((len - 1.0).abs() < 1e-6);
            prop_assert!(s.color.iter().all(|&c| (0.0..=1.0).contains(&c)));
            if mono {
                prop_assert_eq!(s.color, [1.0; 3]);
            }
        }
    }

    #[test]
    fn outline_filter_is_idempotent(shell_scale in 1.01..1.5f64, segments in 6usize..12) {
        let mut mesh = uv_sphere([0.0; 3], 0.5, segments, 4, Material::default());
        mesh.append(&uv_sphere([0.0; 3], 0.5 * shell_scale, segments, 4, Material::default()).flipped());
        let once = filter_outline_shells(&mesh).unwrap();
        let twice = filter_outline_shells(&once).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once.faces.len(), segments * 6);
    }
}
