//! Sparse voxelization of normalized point clouds and shifted-window grouping.
//!
//! Binary layout of a serialized [`SparseVoxelSet`] (little-endian, version 1):
//!
//! ```text
//! magic     4 bytes "SVXS"
//! version   u32
//! R         u32
//! L         u64   active voxel count
//! N         u64   total member count
//! keys      L x (u32 i, u32 j, u32 k), strictly increasing
//! offsets   (L + 1) x u64, offsets[0] = 0, offsets[L] = N
//! members   N x u32 sample indices, ascending within each voxel
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::nnkit::Reader;

pub const VOXEL_SET_MAGIC: &[u8; 4] = b"SVXS";
pub const VOXEL_SET_VERSION: u32 = 1;

/// Tolerance, in normalized units, for points on the boundary of the unit cube or a voxel.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// Integer cell index; ordering is lexicographic with `k` varying fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VoxelKey {
    pub i: u32,
    pub j: u32,
    pub k: u32,
}

impl VoxelKey {
    pub const fn new(i: u32, j: u32, k: u32) -> Self {
        Self { i, j, k }
    }

    pub fn as_array(self) -> [u32; 3] {
        [self.i, self.j, self.k]
    }

    /// Minimum corner in normalized space.
    pub fn min_corner(self, resolution: u32) -> [f64; 3] {
        let h = 1.0 / resolution as f64;
        self.as_array().map(|c| c as f64 * h - 0.5)
    }

    pub fn center(self, resolution: u32) -> [f64; 3] {
        let h = 1.0 / resolution as f64;
        self.as_array().map(|c| (c as f64 + 0.5) * h - 0.5)
    }
}

/// Cell containing `p`: `floor((p + 0.5) * R)` clamped to `[0, R)`.
pub fn key_of(p: [f64; 3], resolution: u32) -> Result<VoxelKey> {
    let mut idx = [0u32; 3];
    for (a, out) in idx.iter_mut().enumerate() {
        let x = p[a];
        if !(-0.5 - BOUNDARY_TOL..=0.5 + BOUNDARY_TOL).contains(&x) {
            return Err(Error::Domain(format!("position {p:?} lies outside [-0.5, 0.5]^3")));
        }
        let c = ((x + 0.5) * resolution as f64).floor();
        *out = c.clamp(0.0, (resolution - 1) as f64) as u32;
    }
    Ok(VoxelKey::new(idx[0], idx[1], idx[2]))
}

/// Affine map of the voxel `key` onto `[0,1]³`.
pub fn local_coords(p: [f64; 3], key: VoxelKey, resolution: u32) -> Result<[f64; 3]> {
    let r = resolution as f64;
    let tol = BOUNDARY_TOL * r;
    let k = key.as_array();
    let mut u = [0.0; 3];
    for a in 0..3 {
        let v = (p[a] + 0.5) * r - k[a] as f64;
        if !(v >= -tol && v <= 1.0 + tol) {
            return Err(Error::Domain(format!("point {p:?} is outside voxel {key:?}")));
        }
        u[a] = v.clamp(0.0, 1.0);
    }
    Ok(u)
}

/// Active voxels of a grid with their member samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseVoxelSet {
    resolution: u32,
    keys: Vec<VoxelKey>,
    offsets: Vec<usize>,
    members: Vec<u32>,
}

/// Result of [`SparseVoxelSet::locate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Located {
    pub voxel: usize,
    pub local: [f64; 3],
    /// Distance from the query to the voxel cube (0 when inside).
    pub distance: f64,
}

impl SparseVoxelSet {
    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[VoxelKey] {
        &self.keys
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn members(&self, voxel: usize) -> &[u32] {
        &self.members[self.offsets[voxel]..self.offsets[voxel + 1]]
    }

    pub fn total_members(&self) -> usize {
        self.members.len()
    }

    pub fn voxel_size(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    pub fn find(&self, key: VoxelKey) -> Option<usize> {
        self.keys.binary_search(&key).ok()
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.keys.iter().map(|k| k.center(self.resolution)).collect()
    }

    /// Builds a set from explicit keys with no member samples (e.g. for generated latents).
    pub fn from_keys(resolution: u32, mut keys: Vec<VoxelKey>) -> Result<Self> {
        keys.sort_unstable();
        keys.dedup();
        if keys.iter().any(|k| k.as_array().iter().any(|&c| c >= resolution)) {
            return Err(Error::Domain(format!("voxel key outside resolution {resolution}")));
        }
        let offsets = vec![0; keys.len() + 1];
        Ok(Self { resolution, keys, offsets, members: Vec::new() })
    }

    /// Members of each voxel, capped at `cap` by a seeded uniform subsample.
    ///
    /// Returns the selected sample indices grouped by voxel (ascending within
    /// each voxel) and the group offsets.
    pub fn capped_members<R: Rng>(&self, cap: usize, rng: &mut R) -> (Vec<u32>, Vec<usize>) {
        let mut out = Vec::with_capacity(self.members.len().min(self.len() * cap));
        let mut offsets = Vec::with_capacity(self.len() + 1);
        offsets.push(0);
        for v in 0..self.len() {
            let m = self.members(v);
            if m.len() <= cap {
                out.extend_from_slice(m);
            } else {
                let mut pick: Vec<usize> = rand::seq::index::sample(rng, m.len(), cap).into_vec();
                pick.sort_unstable();
                out.extend(pick.into_iter().map(|i| m[i]));
            }
            offsets.push(out.len());
        }
        (out, offsets)
    }

    /// Finds the voxel owning `p`.
    ///
    /// Points on shared faces belong to the lexicographically smallest active voxel
    /// containing them. Points outside every active voxel snap to the nearest one if it
    /// lies within `snap_radius`, with local coordinates clamped into that voxel.
    pub fn locate(&self, p: [f64; 3], snap_radius: f64) -> Option<Located> {
        let r = self.resolution as f64;
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for a in 0..3 {
            let x = (p[a] + 0.5) * r;
            let f = x.floor();
            let near_face = (x - x.round()).abs() <= BOUNDARY_TOL * r;
            let reach = (snap_radius * r).ceil() as i64;
            if near_face {
                lo[a] = x.round() as i64 - 1 - reach;
                hi[a] = x.round() as i64 + reach;
            } else {
                lo[a] = f as i64 - reach;
                hi[a] = f as i64 + reach;
            }
            lo[a] = lo[a].max(0);
            hi[a] = hi[a].min(self.resolution as i64 - 1);
        }
        let mut best: Option<Located> = None;
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let key = VoxelKey::new(i as u32, j as u32, k as u32);
                    let Some(v) = self.find(key) else { continue };
                    let (dist, local) = distance_to_voxel(p, key, self.resolution);
                    let within = dist <= BOUNDARY_TOL || dist <= snap_radius;
                    if !within {
                        continue;
                    }
                    // candidates are visited in key order, so strict improvement keeps the smallest key
                    let better = match best {
                        None => true,
                        Some(b) => dist < b.distance - BOUNDARY_TOL,
                    };
                    if better {
                        best = Some(Located { voxel: v, local, distance: dist });
                    }
                }
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.keys.len() * 20 + self.members.len() * 4);
        self.write_into(&mut out);
        out
    }

    pub(crate) fn write_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(VOXEL_SET_MAGIC);
        out.extend_from_slice(&VOXEL_SET_VERSION.to_le_bytes());
        out.extend_from_slice(&self.resolution.to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.members.len() as u64).to_le_bytes());
        for k in &self.keys {
            for c in k.as_array() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        for &o in &self.offsets {
            out.extend_from_slice(&(o as u64).to_le_bytes());
        }
        for &m in &self.members {
            out.extend_from_slice(&m.to_le_bytes());
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let s = Self::read_from(&mut r)?;
        if r.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes after voxel set".into()));
        }
        Ok(s)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        if r.take(4)? != VOXEL_SET_MAGIC {
            return Err(Error::Parse("not a voxel set (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VOXEL_SET_VERSION {
            return Err(Error::Parse(format!("unsupported voxel set version {version}")));
        }
        let resolution = r.u32()?;
        let l = r.u64()? as usize;
        let n = r.u64()? as usize;
        let mut keys = Vec::with_capacity(l);
        for _ in 0..l {
            keys.push(VoxelKey::new(r.u32()?, r.u32()?, r.u32()?));
        }
        let offsets = (0..=l).map(|_| r.u64().map(|o| o as usize)).collect::<Result<Vec<_>>>()?;
        let members = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let sorted = keys.windows(2).all(|w| w[0] < w[1]);
        let offsets_ok = offsets.first() == Some(&0)
            && offsets.last() == Some(&n)
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if !sorted || !offsets_ok || keys.iter().any(|k| k.as_array().iter().any(|&c| c >= resolution))
        {
            return Err(Error::Parse("inconsistent voxel set".into()));
        }
        Ok(Self { resolution, keys, offsets, members })
    }
}

fn distance_to_voxel(p: [f64; 3], key: VoxelKey, resolution: u32) -> (f64, [f64; 3]) {
    let h = 1.0 / resolution as f64;
    let lo = key.min_corner(resolution);
    let mut d2 = 0.0;
    let mut local = [0.0; 3];
    for a in 0..3 {
        let c = p[a].clamp(lo[a], lo[a] + h);
        d2 += (p[a] - c) * (p[a] - c);
        local[a] = ((c - lo[a]) / h).clamp(0.0, 1.0);
    }
    (d2.sqrt(), local)
}

/// Voxelizes normalized positions at resolution `R`.
pub fn voxelize_points(positions: &[[f64; 3]], resolution: u32) -> Result<SparseVoxelSet> {
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!("resolution must be >= 2, got {resolution}")));
    }
    let mut tagged = Vec::with_capacity(positions.len());
    for (idx, &p) in positions.iter().enumerate() {
        tagged.push((key_of(p, resolution)?, idx as u32));
    }
    tagged.sort_unstable();
    let mut keys = Vec::new();
    let mut offsets = vec![0];
    let mut members = Vec::with_capacity(tagged.len());
    for (i, &(key, idx)) in tagged.iter().enumerate() {
        if i > 0 && tagged[i - 1].0 != key {
            offsets.push(members.len());
        }
        if keys.last() != Some(&key) {
            keys.push(key);
        }
        members.push(idx);
    }
    if !tagged.is_empty() {
        offsets.push(members.len());
    }
    Ok(SparseVoxelSet { resolution, keys, offsets, members })
}

/// Voxelizes surface samples by position.
pub fn voxelize(samples: &[crate::geometry::SurfaceSample], resolution: u32) -> Result<SparseVoxelSet> {
    let positions: Vec<[f64; 3]> = samples.iter().map(|s| s.position).collect();
    voxelize_points(&positions, resolution)
}

/// Grouping of active voxels into (possibly shifted) cubic windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPartition {
    /// Voxel indices, grouped by window.
    pub order: Vec<usize>,
    /// Group `g` spans `order[offsets[g]..offsets[g + 1]]`.
    pub offsets: Vec<usize>,
    /// Window index per axis for each group.
    pub group_ids: Vec<[u32; 3]>,
}

impl WindowPartition {
    pub fn num_groups(&self) -> usize {
        self.group_ids.len()
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.order[self.offsets[g]..self.offsets[g + 1]]
    }

    /// Inverse of `order`: position of each voxel in the grouped layout.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (pos, &v) in self.order.iter().enumerate() {
            inv[v] = pos;
        }
        inv
    }
}

/// Window id of a key: `floor((idx + shift) / window)` per axis.
pub fn window_id(key: VoxelKey, window: u32, shift: u32) -> [u32; 3] {
    key.as_array().map(|c| (c + shift) / window)
}

/// Partitions keys (in any order) into windows; members keep their input order.
pub fn window_partition_keys(keys: &[VoxelKey], window: u32, shift: u32) -> Result<WindowPartition> {
    if window == 0 || shift >= window {
        return Err(Error::InvalidArgument(format!(
            "window partition needs 1 <= window and shift < window (got {window}, {shift})"
        )));
    }
    let mut idx: Vec<([u32; 3], usize)> =
        keys.iter().enumerate().map(|(i, &k)| (window_id(k, window, shift), i)).collect();
    idx.sort_unstable();
    let mut order = Vec::with_capacity(keys.len());
    let mut offsets = vec![0];
    let mut group_ids = Vec::new();
    for (n, &(gid, i)) in idx.iter().enumerate() {
        if n > 0 && idx[n - 1].0 != gid {
            offsets.push(order.len());
        }
        if group_ids.last() != Some(&gid) {
            group_ids.push(gid);
        }
        order.push(i);
    }
    if !idx.is_empty() {
        offsets.push(order.len());
    }
    Ok(WindowPartition { order, offsets, group_ids })
}

pub fn window_partition(vset: &SparseVoxelSet, window: u32, shift: u32) -> Result<WindowPartition> {
    if window > vset.resolution() {
        return Err(Error::InvalidArgument(format!(
            "window {window} exceeds resolution {}",
            vset.resolution()
        )));
    }
    window_partition_keys(vset.keys(), window, shift)
}
