use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::tensor::matmul_into;
use super::{ParamStore, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row ranges for segmented attention: queries in segment `s` attend only to
/// keys/values in segment `s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    pub q_offsets: Vec<usize>,
    pub kv_offsets: Vec<usize>,
}

impl Segments {
    /// Each segment attends within itself (self-attention over groups).
    pub fn same(offsets: Vec<usize>) -> Self {
        Self { q_offsets: offsets.clone(), kv_offsets: offsets }
    }

    /// One query row per key segment.
    pub fn pooled(kv_offsets: Vec<usize>) -> Self {
        let q_offsets = (0..kv_offsets.len()).collect();
        Self { q_offsets, kv_offsets }
    }

    pub fn len(&self) -> usize {
        self.q_offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, q_rows: usize, kv_rows: usize) -> Result<()> {
        if self.q_offsets.len() != self.kv_offsets.len() || self.q_offsets.is_empty() {
            return Err(Error::Shape("segment offset tables disagree".into()));
        }
        if *self.q_offsets.last().unwrap() != q_rows || *self.kv_offsets.last().unwrap() != kv_rows
        {
            return Err(Error::Shape(format!(
                "segments cover {}x{} rows, tensors have {}x{}",
                self.q_offsets.last().unwrap(),
                self.kv_offsets.last().unwrap(),
                q_rows,
                kv_rows
            )));
        }
        for s in 0..self.len() {
            let (q0, q1) = (self.q_offsets[s], self.q_offsets[s + 1]);
            let (k0, k1) = (self.kv_offsets[s], self.kv_offsets[s + 1]);
            if q1 < q0 || k1 < k0 {
                return Err(Error::Shape("segment offsets must be non-decreasing".into()));
            }
            if q1 > q0 && k1 == k0 {
                return Err(Error::EmptyVoxel(s));
            }
        }
        Ok(())
    }
}

/// User-defined differentiable operation.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Gradients with respect to each input, in input order.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Tensor<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: T, hi: T },
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<T> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, segs: Arc<Segments>, scale: T, probs: Vec<T> },
    GatherRows { x: Var, idx: Arc<[usize]> },
    Concat(Vec<Var>),
    Trilinear { grid: Var, coords: Var, cells: Arc<[usize]> },
    Sum(Var),
    Mean(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode recording of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const LN_EPS: f64 = 1e-5;

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter once per tape; later calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?
            .clone();
        let v = self.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Makes `name` resolve to an existing value in later [`Tape::param`] calls.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    /// Parameters bound on this tape, by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.val(x).map(f);
        self.push(value, op, &[x])
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    /// `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(ta.data(), m, k, false, tb.data(), k, n, false, &mut out, T::zero());
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `[d]` bias to every row of `[n,d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(b));
        let d = tx.cols();
        if tb.len() != d || tx.shape().len() != 2 {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let mut value = tx.clone();
        for row in value.data_mut().chunks_mut(d) {
            for (r, &bb) in row.iter_mut().zip(tb.data()) {
                *r = *r + bb;
            }
        }
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_fwd, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Layer normalization over the last extent with affine `gamma`, `beta` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.val(x);
        let d = tx.cols();
        let (g, b) = (self.val(gamma), self.val(beta));
        if g.len() != d || b.len() != d || d == 0 {
            return Err(shape_err("layer_norm", tx.shape(), g.shape()));
        }
        let mut out = tx.clone();
        let mut rstds = Vec::with_capacity(tx.rows());
        let eps = T::of(LN_EPS);
        let dn = T::of(d as f64);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = (var + eps).sqrt().recip();
            for ((r, &gg), &bb) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *r = (*r - mean) * rstd * gg + bb;
            }
            rstds.push(rstd);
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, rstd: rstds }, &[x, gamma, beta]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.val(x).clone();
        let d = out.cols();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Scaled dot-product attention `softmax(q kᵀ / √d) v`, restricted to segments.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segs: Arc<Segments>) -> Result<Var> {
        let (tq, tk, tv) = (self.val(q), self.val(k), self.val(v));
        let d = tq.cols();
        if tk.cols() != d || tk.rows() != tv.rows() || d == 0 {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        segs.validate(tq.rows(), tk.rows())?;
        let dv = tv.cols();
        let scale = T::of(1.0 / (d as f64).sqrt());
        let mut out = vec![T::zero(); tq.rows() * dv];
        let total: usize = (0..segs.len())
            .map(|s| {
                (segs.q_offsets[s + 1] - segs.q_offsets[s])
                    * (segs.kv_offsets[s + 1] - segs.kv_offsets[s])
            })
            .sum();
        let mut probs = vec![T::zero(); total];
        let mut p_off = 0;
        for s in 0..segs.len() {
            let (q0, q1) = (segs.q_offsets[s], segs.q_offsets[s + 1]);
            let (k0, k1) = (segs.kv_offsets[s], segs.kv_offsets[s + 1]);
            let (m, n) = (q1 - q0, k1 - k0);
            if m == 0 {
                continue;
            }
            let p = &mut probs[p_off..p_off + m * n];
            matmul_into(
                &tq.data()[q0 * d..q1 * d],
                m,
                d,
                false,
                &tk.data()[k0 * d..k1 * d],
                n,
                d,
                true,
                p,
                T::zero(),
            );
            for row in p.chunks_mut(n) {
                for x in row.iter_mut() {
                    *x = *x * scale;
                }
                softmax_in_place(row);
            }
            matmul_into(
                p,
                m,
                n,
                false,
                &tv.data()[k0 * dv..k1 * dv],
                n,
                dv,
                false,
                &mut out[q0 * dv..q1 * dv],
                T::zero(),
            );
            p_off += m * n;
        }
        let value = Tensor::new(&[tq.rows(), dv], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, segs, scale, probs }, &[q, k, v]))
    }

    /// Unsegmented attention of all queries over all keys.
    pub fn attention_dense(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let segs = Segments {
            q_offsets: vec![0, self.val(q).rows()],
            kv_offsets: vec![0, self.val(k).rows()],
        };
        self.attention(q, k, v, Arc::new(segs))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let tx = self.val(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.rows()) {
            return Err(Error::Shape(format!("gather index {bad} >= {} rows", tx.rows())));
        }
        let value = tx.select_rows(&idx);
        Ok(self.push(value, Op::GatherRows { x, idx }, &[x]))
    }

    /// Concatenates `[n, d_i]` tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.val(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).cols()).collect();
        if parts.iter().any(|&p| self.val(p).rows() != n) {
            return Err(Error::Shape("concat: row counts differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.val(p).row(r));
            }
        }
        let value = Tensor::new(&[n, total], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Trilinear interpolation of per-cell corner features.
    ///
    /// `grid` is `[cells, 8 * c]` with corner index `4*dx + 2*dy + dz`; `coords` is
    /// `[m, 3]` local coordinates in `[0,1]³`; `cells[i]` selects the grid row for query `i`.
    pub fn trilinear(&mut self, grid: Var, coords: Var, cells: Arc<[usize]>) -> Result<Var> {
        let (tg, tc) = (self.val(grid), self.val(coords));
        if tg.cols() % 8 != 0 || tc.cols() != 3 || tc.rows() != cells.len() {
            return Err(shape_err("trilinear", tg.shape(), tc.shape()));
        }
        if cells.iter().any(|&c| c >= tg.rows()) {
            return Err(Error::Shape("trilinear: cell index out of range".into()));
        }
        let tol = T::of(1e-9);
        if tc.data().iter().any(|&u| !(u >= -tol && u <= T::one() + tol)) {
            return Err(Error::Domain("trilinear coordinates must lie in [0,1]^3".into()));
        }
        let c = tg.cols() / 8;
        let m = cells.len();
        let mut out = vec![T::zero(); m * c];
        for i in 0..m {
            let u = tc.row(i);
            let w = trilinear_weights(u[0], u[1], u[2]);
            let g = tg.row(cells[i]);
            let o = &mut out[i * c..(i + 1) * c];
            for (corner, &wc) in w.iter().enumerate() {
                for (oo, &gv) in o.iter_mut().zip(&g[corner * c..(corner + 1) * c]) {
                    *oo = *oo + wc * gv;
                }
            }
        }
        let value = Tensor::new(&[m, c], out)?;
        Ok(self.push(value, Op::Trilinear { grid, coords, cells }, &[grid, coords]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.val(v)).collect();
        let value = op.forward(&vals)?;
        Ok(self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, inputs))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.val(out).shape(), T::one()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e = *e + *x;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        let elementwise = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
            // f(input, output, grad_out)
            let xv = self.val(x);
            let data = xv
                .data()
                .iter()
                .zip(node.value.data())
                .zip(g.data())
                .map(|((&a, &y), &gy)| f(a, y, gy))
                .collect();
            Tensor::new(xv.shape(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(g.data(), m, n, false, tb.data(), k, n, true, &mut da, T::zero());
                    acc(*a, Tensor::new(&[m, k], da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_into(ta.data(), m, k, true, g.data(), m, n, false, &mut db, T::zero());
                    acc(*b, Tensor::new(&[k, n], db).unwrap());
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                if self.needs(*b) {
                    let d = g.cols();
                    let mut db = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (s, &v) in db.iter_mut().zip(row) {
                            *s = *s + v;
                        }
                    }
                    acc(*b, Tensor::new(self.val(*b).shape(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    acc(*a, Tensor::new(ta.shape(), d).unwrap());
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    acc(*b, Tensor::new(tb.shape(), d).unwrap());
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                acc(*x, g.map(|v| v * s));
            }
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Relu(x) => {
                acc(*x, elementwise(*x, &|a, _, gy| if a > T::zero() { gy } else { T::zero() }))
            }
            Op::Gelu(x) => acc(*x, elementwise(*x, &|a, _, gy| gy * gelu_grad(a))),
            Op::Sigmoid(x) => {
                acc(*x, elementwise(*x, &|_, y, gy| gy * y * (T::one() - y)))
            }
            Op::Exp(x) => acc(*x, elementwise(*x, &|_, y, gy| gy * y)),
            Op::Abs(x) => acc(
                *x,
                elementwise(*x, &|a, _, gy| {
                    if a > T::zero() {
                        gy
                    } else if a < T::zero() {
                        -gy
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Square(x) => acc(*x, elementwise(*x, &|a, _, gy| gy * (a + a))),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *x,
                    elementwise(*x, &|a, _, gy| if a >= lo && a <= hi { gy } else { T::zero() }),
                )
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let tx = self.val(*x);
                let tg = self.val(*gamma);
                let d = tx.cols();
                let dn = T::of(d as f64);
                let mut dx = vec![T::zero(); tx.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let xr = tx.row(r);
                    let gr = g.row(r);
                    let mean = xr.iter().copied().sum::<T>() / dn;
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rs;
                        dxhat[j] = gr[j] * tg.data()[j];
                        dgamma[j] = dgamma[j] + gr[j] * xhat[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        s1 = s1 + dxhat[j];
                        s2 = s2 + dxhat[j] * xhat[j];
                    }
                    let (m1, m2) = (s1 / dn, s2 / dn);
                    let out = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(*x, Tensor::new(tx.shape(), dx).unwrap());
                acc(*gamma, Tensor::new(tg.shape(), dgamma).unwrap());
                acc(*beta, Tensor::new(self.val(*beta).shape(), dbeta).unwrap());
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.cols();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape(), dx).unwrap());
            }
            Op::Attention { q, k, v, segs, scale, probs } => {
                let (tq, tk, tv) = (self.val(*q), self.val(*k), self.val(*v));
                let (d, dv) = (tq.cols(), tv.cols());
                let mut dq = vec![T::zero(); tq.len()];
                let mut dk = vec![T::zero(); tk.len()];
                let mut dvv = vec![T::zero(); tv.len()];
                let mut p_off = 0;
                let mut ds = Vec::new();
                for s in 0..segs.len() {
                    let (q0, q1) = (segs.q_offsets[s], segs.q_offsets[s + 1]);
                    let (k0, k1) = (segs.kv_offsets[s], segs.kv_offsets[s + 1]);
                    let (m, n) = (q1 - q0, k1 - k0);
                    if m == 0 {
                        continue;
                    }
                    let p = &probs[p_off..p_off + m * n];
                    p_off += m * n;
                    let go = &g.data()[q0 * dv..q1 * dv];
                    // dV += Pᵀ dO
                    matmul_into(p, m, n, true, go, m, dv, false, &mut dvv[k0 * dv..k1 * dv], T::one());
                    // dP = dO Vᵀ
                    ds.clear();
                    ds.resize(m * n, T::zero());
                    matmul_into(go, m, dv, false, &tv.data()[k0 * dv..k1 * dv], n, dv, true, &mut ds, T::zero());
                    for (dsr, pr) in ds.chunks_mut(n).zip(p.chunks(n)) {
                        let dot: T = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        for (x, &pp) in dsr.iter_mut().zip(pr) {
                            *x = pp * (*x - dot) * *scale;
                        }
                    }
                    matmul_into(&ds, m, n, false, &tk.data()[k0 * d..k1 * d], n, d, false, &mut dq[q0 * d..q1 * d], T::one());
                    matmul_into(&ds, m, n, true, &tq.data()[q0 * d..q1 * d], m, d, false, &mut dk[k0 * d..k1 * d], T::one());
                }
                acc(*q, Tensor::new(tq.shape(), dq).unwrap());
                acc(*k, Tensor::new(tk.shape(), dk).unwrap());
                acc(*v, Tensor::new(tv.shape(), dvv).unwrap());
            }
            Op::GatherRows { x, idx } => {
                let tx = self.val(*x);
                let c = tx.cols();
                let mut dx = vec![T::zero(); tx.len()];
                for (i, &src) in idx.iter().enumerate() {
                    for (a, &b) in dx[src * c..(src + 1) * c].iter_mut().zip(g.row(i)) {
                        *a = *a + b;
                    }
                }
                acc(*x, Tensor::new(tx.shape(), dx).unwrap());
            }
            Op::Concat(parts) => {
                let n = g.rows();
                let mut col = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.row(r)[col..col + w]);
                        }
                        acc(p, Tensor::new(self.val(p).shape(), d).unwrap());
                    }
                    col += w;
                }
            }
            Op::Trilinear { grid, coords, cells } => {
                let (tg, tc) = (self.val(*grid), self.val(*coords));
                let c = tg.cols() / 8;
                let mut dgrid = vec![T::zero(); if self.needs(*grid) { tg.len() } else { 0 }];
                let mut dc = vec![T::zero(); tc.len()];
                for (i, &cell) in cells.iter().enumerate() {
                    let u = tc.row(i);
                    let w = trilinear_weights(u[0], u[1], u[2]);
                    let dw = trilinear_weight_grads(u[0], u[1], u[2]);
                    let gi = g.row(i);
                    let grow = tg.row(cell);
                    for corner in 0..8 {
                        let gc = &grow[corner * c..(corner + 1) * c];
                        let dot: T = gc.iter().zip(gi).map(|(&a, &b)| a * b).sum();
                        for ax in 0..3 {
                            dc[i * 3 + ax] = dc[i * 3 + ax] + dw[corner][ax] * dot;
                        }
                        if !dgrid.is_empty() {
                            let base = cell * 8 * c + corner * c;
                            for (t, &gv) in dgrid[base..base + c].iter_mut().zip(gi) {
                                *t = *t + w[corner] * gv;
                            }
                        }
                    }
                }
                if !dgrid.is_empty() {
                    acc(*grid, Tensor::new(tg.shape(), dgrid).unwrap());
                }
                acc(*coords, Tensor::new(tc.shape(), dc).unwrap());
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.val(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let tx = self.val(*x);
                let gv = g.data()[0] / T::of(tx.len().max(1) as f64);
                acc(*x, Tensor::full(tx.shape(), gv));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.val(v)).collect();
                let gs = op.backward(&vals, &node.value, g);
                for (&v, gi) in inputs.iter().zip(gs) {
                    acc(v, gi);
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    let th = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * dinner
}

/// Corner weights, corner index `4*dx + 2*dy + dz`.
#[inline]
pub(crate) fn trilinear_weights<T: Scalar>(x: T, y: T, z: T) -> [T; 8] {
    let one = T::one();
    let (ax, ay, az) = ([one - x, x], [one - y, y], [one - z, z]);
    let mut w = [T::zero(); 8];
    for (i, wi) in w.iter_mut().enumerate() {
        *wi = ax[(i >> 2) & 1] * ay[(i >> 1) & 1] * az[i & 1];
    }
    w
}

#[inline]
fn trilinear_weight_grads<T: Scalar>(x: T, y: T, z: T) -> [[T; 3]; 8] {
    let one = T::one();
    let (ax, ay, az) = ([one - x, x], [one - y, y], [one - z, z]);
    let dd = [-one, one];
    let mut out = [[T::zero(); 3]; 8];
    for (i, o) in out.iter_mut().enumerate() {
        let (bx, by, bz) = ((i >> 2) & 1, (i >> 1) & 1, i & 1);
        *o = [
            dd[bx] * ay[by] * az[bz],
            ax[bx] * dd[by] * az[bz],
            ax[bx] * ay[by] * dd[bz],
        ];
    }
    out
}
