use std::collections::BTreeSet;

use proptest::prelude::*;
use texfield::geometry::shapes::uv_sphere;
use texfield::geometry::{sample_surface, Material};
use texfield::voxelgrid::{
    key_of, local_coords, voxelize, voxelize_points, window_id, window_partition, SparseVoxelSet, VoxelKey,
};

#[test]
fn sphere_occupancy_matches_dense_enumeration() {
    let mesh = uv_sphere([0.0; 3], 0.45, 48, 24, Material::default());
    let samples = sample_surface(&mesh, 100_000, 4, false).unwrap();
    let vset = voxelize(&samples, 16).unwrap();
    // Dense oracle: walk all 16³ cells and keep those containing at least one sample.
    let r = 16usize;
    let mut dense = vec![false; r * r * r];
    for s in &samples {
        let idx = s.position.map(|c| (((c + 0.5) * r as f64).floor() as usize).min(r - 1));
        dense[(idx[0] * r + idx[1]) * r + idx[2]] = true;
    }
    let mut expected = Vec::new();
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                if dense[(i * r + j) * r + k] {
                    expected.push(VoxelKey::new(i as u32, j as u32, k as u32));
                }
            }
        }
    }
    assert_eq!(vset.keys(), expected.as_slice());
    assert_eq!(vset.total_members(), samples.len());
}

#[test]
fn shifted_windows_differ_only_at_borders() {
    let keys: Vec<VoxelKey> = (0..8).flat_map(|i| (0..8).flat_map(move |j| (0..8).map(move |k| VoxelKey::new(i, j, k)))).collect();
    let vset = SparseVoxelSet::from_keys(8, keys).unwrap();
    let plain = window_partition(&vset, 4, 0).unwrap();
    let shifted = window_partition(&vset, 4, 2).unwrap();
    let sizes = |p: &texfield::voxelgrid::WindowPartition| {
        let mut s: Vec<usize> = (0..p.num_groups()).map(|g| p.group(g).len()).collect();
        s.sort_unstable();
        s
    };
    assert_eq!(sizes(&plain), vec![64; 8]);
    // Shifted windows: interior groups stay full (4³); only those clipped by the grid border shrink.
    let s = sizes(&shifted);
    assert_eq!(s.iter().sum::<usize>(), 512);
    assert_eq!(s.iter().filter(|&&n| n == 64).count(), 1);
    for g in 0..shifted.num_groups() {
        if shifted.group(g).len() < 64 {
            assert!(shifted.group_ids[g].iter().any(|&c| c == 0 || c == 2));
        }
    }
}

fn arb_points(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec([-0.5..=0.5f64, -0.5..=0.5f64, -0.5..=0.5f64], 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn membership_is_an_exact_partition(pts in arb_points(300), r in 2u32..40) {
        let v = voxelize_points(&pts, r).unwrap();
        prop_assert_eq!(v.total_members(), pts.len());
        prop_assert!(v.keys().windows(2).all(|w| w[0] < w[1]));
        let mut seen = BTreeSet::new();
        for vox in 0..v.len() {
            prop_assert!(!v.members(vox).is_empty());
            for &m in v.members(vox) {
                prop_assert!(seen.insert(m));
                prop_assert_eq!(key_of(pts[m as usize], r).unwrap(), v.keys()[vox]);
            }
        }
    }

    #[test]
    fn local_coords_round_trip(p in [-0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64], r in 2u32..130) {
        let key = key_of(p, r).unwrap();
        let u = local_coords(p, key, r).unwrap();
        let lo = key.min_corner(r);
        for a in 0..3 {
            prop_assert!((0.0..=1.0).contains(&u[a]));
            prop_assert!((lo[a] + u[a] / r as f64 - p[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn window_groups_match_id_oracle(pts in arb_points(200), window in 1u32..8, shift_frac in 0.0..1.0f64) {
        let r = 8;
        let shift = ((window as f64) * shift_frac) as u32 % window;
        let v = voxelize_points(&pts, r).unwrap();
        let part = window_partition(&v, window, shift).unwrap();
        let mut covered = vec![0usize; v.len()];
        for g in 0..part.num_groups() {
            for &i in part.group(g) {
                covered[i] += 1;
                let k = v.keys()[i].as_array();
                let expect = k.map(|c| (c + shift) / window);
                prop_assert_eq!(part.group_ids[g], expect);
                prop_assert_eq!(window_id(v.keys()[i], window, shift), expect);
            }
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
        prop_assert_eq!(part.clone(), window_partition(&v, window, shift).unwrap());
    }

    #[test]
    fn serialization_round_trips(pts in arb_points(100), r in 2u32..64) {
        let v = voxelize_points(&pts, r).unwrap();
        prop_assert_eq!(SparseVoxelSet::from_bytes(&v.to_bytes()).unwrap(), v);
    }
}
