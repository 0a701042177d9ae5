//! Point-voxel attention stages and shifted-window transformer blocks.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nnkit::{Activation, LayerNorm, Linear, Mlp, ParamStore, Scalar, Segments, Tape, Var};
use crate::voxelgrid::{window_partition_keys, VoxelKey};

/// Self-attention among the points of each voxel.
///
/// `h` holds point features grouped by voxel; voxel `k` spans rows
/// `offsets[k]..offsets[k+1]`. Returns `softmax(QKᵀ/√d)V` per voxel with
/// `Q = h·wq`, `K = h·wk`, `V = h·wv`.
pub fn intra_voxel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    offsets: &[usize],
) -> Result<Var> {
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    tape.attention(q, k, v, Arc::new(Segments::same(offsets.to_vec())))
}

/// Pools each voxel's points into one row by attending from a shared query.
///
/// `query` is `[1, d]`; the output has one row per voxel:
/// `Σᵢ softmax(Q_v K_xᵢᵀ/√d) V_xᵢ`.
pub fn point_voxel_cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    query: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    offsets: &[usize],
) -> Result<Var> {
    let voxels = offsets.len().saturating_sub(1);
    let q1 = tape.matmul(query, wq)?;
    let q = tape.gather_rows(q1, vec![0; voxels].into())?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    tape.attention(q, k, v, Arc::new(Segments::pooled(offsets.to_vec())))
}

/// Window grouping of a key set, precomputed once per forward pass.
pub struct WindowLayout {
    order: Arc<[usize]>,
    inverse: Arc<[usize]>,
    segments: Arc<Segments>,
}

impl WindowLayout {
    pub fn new(keys: &[VoxelKey], window: u32, shift: u32) -> Result<Self> {
        let part = window_partition_keys(keys, window, shift)?;
        let inverse = part.inverse();
        Ok(Self {
            order: part.order.into(),
            inverse: inverse.into(),
            segments: Arc::new(Segments::same(part.offsets)),
        })
    }
}

/// Layouts for unshifted and half-shifted windows.
pub struct WindowLayouts {
    pub plain: WindowLayout,
    pub shifted: WindowLayout,
}

impl WindowLayouts {
    pub fn new(keys: &[VoxelKey], window: u32) -> Result<Self> {
        Ok(Self {
            plain: WindowLayout::new(keys, window, 0)?,
            shifted: WindowLayout::new(keys, window, window / 2)?,
        })
    }
}

/// Pre-norm transformer block with attention restricted to cubic voxel windows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowBlock {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub shifted: bool,
}

impl WindowBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        mlp_ratio: usize,
        shifted: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            q: Linear::without_bias(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::without_bias(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[dim, dim * mlp_ratio, dim], Activation::Gelu, rng),
            shifted,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        layouts: &WindowLayouts,
    ) -> Result<Var> {
        let layout = if self.shifted { &layouts.shifted } else { &layouts.plain };
        let y = self.norm1.forward(tape, store, x)?;
        let q = self.q.forward(tape, store, y)?;
        let k = self.k.forward(tape, store, y)?;
        let v = self.v.forward(tape, store, y)?;
        let q = tape.gather_rows(q, layout.order.clone())?;
        let k = tape.gather_rows(k, layout.order.clone())?;
        let v = tape.gather_rows(v, layout.order.clone())?;
        let a = tape.attention(q, k, v, layout.segments.clone())?;
        let a = tape.gather_rows(a, layout.inverse.clone())?;
        let a = self.out.forward(tape, store, a)?;
        let x = tape.add(x, a)?;
        let y = self.norm2.forward(tape, store, x)?;
        let y = self.mlp.forward(tape, store, y)?;
        tape.add(x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_voxel_pools_to_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::<f64>::new();
        let rand_t = |rng: &mut ChaCha8Rng, r, c| {
            Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = tape.constant(rand_t(&mut rng, 1, 3));
        let q = tape.constant(rand_t(&mut rng, 1, 3));
        let wq = tape.constant(rand_t(&mut rng, 3, 3));
        let wk = tape.constant(rand_t(&mut rng, 3, 3));
        let wv = tape.constant(rand_t(&mut rng, 3, 2));
        let out = point_voxel_cross_attention(&mut tape, x, q, wq, wk, wv, &[0, 1]).unwrap();
        let proj = tape.matmul(x, wv).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(proj)) < 1e-15);
    }

    #[test]
    fn window_block_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let block = WindowBlock::new(&mut store, "b", 4, 2, true, &mut rng);
        let keys: Vec<VoxelKey> = (0..10).map(|i| VoxelKey::new(i % 5, i / 5, (i * 3) % 7)).collect();
        let x = Tensor::new(&[10, 4], (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let run = |keys: &[VoxelKey], x: Tensor<f64>| {
            let mut tape = Tape::new();
            let layouts = WindowLayouts::new(keys, 4).unwrap();
            let xv = tape.constant(x);
            let y = block.forward(&mut tape, &store, xv, &layouts).unwrap();
            tape.value(y).clone()
        };
        let base = run(&keys, x.clone());
        let perm: Vec<usize> = vec![3, 7, 0, 9, 1, 5, 2, 8, 6, 4];
        let pkeys: Vec<VoxelKey> = perm.iter().map(|&i| keys[i]).collect();
        let permuted = run(&pkeys, x.select_rows(&perm));
        assert!(permuted.max_abs_diff(&base.select_rows(&perm)) < 1e-12);
    }
}
