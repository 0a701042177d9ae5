//! Central-difference verification of reverse-mode gradients.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Activation, Mlp, ParamStore, Segments, Tape, Tensor, Var};

/// Denominator floor in the relative error `|a - n| / max(|a|, |n|, floor)`.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct InputError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub tolerance: f64,
    pub inputs: Vec<InputError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.inputs.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|e| e.max_rel_error < self.tolerance)
    }

    /// Inputs whose error reached the tolerance.
    pub fn failing(&self) -> impl Iterator<Item = &InputError> {
        self.inputs.iter().filter(move |e| !(e.max_rel_error < self.tolerance))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} max rel err {:.3e} (tol {:.0e}) {}",
            self.op,
            self.max_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for e in self.failing() {
            write!(f, " [{}: {:.3e}]", e.name, e.max_rel_error)?;
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// The output of `f` is reduced to a scalar by a fixed random projection so that
/// every output component contributes.
pub fn grad_check<F>(
    op: &str,
    inputs: &[(&str, Tensor<f64>)],
    eps: f64,
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut proj: Option<Tensor<f64>> = None;
    let mut eval = |values: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let w = proj
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
                let n = shape.iter().product();
                Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .clone();
        let w = tape.constant(w);
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss).data()[0];
        let grads = if want_grads {
            let g = tape.backward(loss);
            vars.iter()
                .zip(values)
                .map(|(&v, t)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, analytic) = eval(&base, true)?;
    let mut report = GradCheckReport { op: op.to_string(), tolerance, inputs: Vec::new() };
    for (i, (name, t)) in inputs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..t.len() {
            let mut plus = base.clone();
            plus[i].data_mut()[j] += eps;
            let mut minus = base.clone();
            minus[i].data_mut()[j] -= eps;
            let numeric = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        report.inputs.push(InputError { name: name.to_string(), max_rel_error: worst });
    }
    Ok(report)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|x| x.signum() * (0.2 + 0.8 * x.abs()))
}

/// Runs the gradient check on every exported op.
pub fn standard_suite(tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eps = 1e-5;
    let mut out = Vec::new();
    let r = &mut rng;

    let (x, w, b) = (random(r, &[3, 4]), random(r, &[4, 2]), random(r, &[2]));
    out.push(grad_check("linear", &[("x", x), ("w", w), ("b", b)], eps, tolerance, |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    })?);

    let (a, b) = (random(r, &[3, 4]), random(r, &[3, 4]));
    out.push(grad_check("add", &[("a", a.clone()), ("b", b.clone())], eps, tolerance, |t, v| t.add(v[0], v[1]))?);
    out.push(grad_check("sub", &[("a", a.clone()), ("b", b.clone())], eps, tolerance, |t, v| t.sub(v[0], v[1]))?);
    out.push(grad_check("mul", &[("a", a.clone()), ("b", b)], eps, tolerance, |t, v| t.mul(v[0], v[1]))?);
    out.push(grad_check("scale", &[("x", a.clone())], eps, tolerance, |t, v| Ok(t.scale(v[0], -1.7)))?);
    out.push(grad_check("add_scalar", &[("x", a.clone())], eps, tolerance, |t, v| Ok(t.add_scalar(v[0], 0.3)))?);
    let k = away_from_zero(r, &[3, 4]);
    out.push(grad_check("relu", &[("x", k.clone())], eps, tolerance, |t, v| Ok(t.relu(v[0])))?);
    out.push(grad_check("abs", &[("x", k.clone())], eps, tolerance, |t, v| Ok(t.abs(v[0])))?);
    out.push(grad_check("clamp", &[("x", k.map(|x| 0.9 * x))], eps, tolerance, |t, v| Ok(t.clamp(v[0], -0.5, 0.5)))?);
    out.push(grad_check("gelu", &[("x", a.clone())], eps, tolerance, |t, v| Ok(t.gelu(v[0])))?);
    out.push(grad_check("sigmoid", &[("x", a.clone())], eps, tolerance, |t, v| Ok(t.sigmoid(v[0])))?);
    out.push(grad_check("exp", &[("x", a.clone())], eps, tolerance, |t, v| Ok(t.exp(v[0])))?);
    out.push(grad_check("square", &[("x", a.clone())], eps, tolerance, |t, v| Ok(t.square(v[0])))?);
    out.push(grad_check("sum", &[("x", a.clone())], eps, tolerance, |t, v| Ok(t.sum(v[0])))?);
    out.push(grad_check("mean", &[("x", a.clone())], eps, tolerance, |t, v| Ok(t.mean(v[0])))?);
    out.push(grad_check("softmax", &[("x", random(r, &[3, 5]).map(|x| 2.0 * x))], eps, tolerance, |t, v| Ok(t.softmax(v[0])))?);

    let (x, g, bb) = (random(r, &[4, 6]), random(r, &[6]), random(r, &[6]));
    out.push(grad_check("layer_norm", &[("x", x), ("gamma", g), ("beta", bb)], eps, tolerance, |t, v| {
        t.layer_norm(v[0], v[1], v[2])
    })?);

    let (q, kk, vv) = (random(r, &[2, 3]), random(r, &[3, 3]), random(r, &[3, 2]));
    out.push(grad_check("attention", &[("q", q), ("k", kk), ("v", vv)], eps, tolerance, |t, v| {
        t.attention_dense(v[0], v[1], v[2])
    })?);
    let (q, kk, vv) = (random(r, &[5, 4]), random(r, &[7, 4]), random(r, &[7, 3]));
    let segs = Arc::new(Segments { q_offsets: vec![0, 2, 2, 5], kv_offsets: vec![0, 3, 4, 7] });
    out.push(grad_check("seg_attention", &[("q", q), ("k", kk), ("v", vv)], eps, tolerance, move |t, v| {
        t.attention(v[0], v[1], v[2], segs.clone())
    })?);

    let x = random(r, &[4, 3]);
    let idx: Arc<[usize]> = vec![3, 0, 0, 2, 1].into();
    out.push(grad_check("gather_rows", &[("x", x)], eps, tolerance, move |t, v| t.gather_rows(v[0], idx.clone()))?);
    let (a, b) = (random(r, &[3, 2]), random(r, &[3, 4]));
    out.push(grad_check("concat", &[("a", a), ("b", b)], eps, tolerance, |t, v| t.concat(&[v[0], v[1]]))?);

    let grid = random(r, &[2, 8 * 3]);
    let coords = random(r, &[4, 3]).map(|x| 0.5 + 0.4 * x);
    let cells: Arc<[usize]> = vec![0, 1, 1, 0].into();
    out.push(grad_check("trilinear", &[("grid", grid), ("coords", coords)], eps, tolerance, move |t, v| {
        t.trilinear(v[0], v[1], cells.clone())
    })?);

    let mut store = ParamStore::<f64>::new();
    let mlp = Mlp::new(&mut store, "mlp", &[3, 5, 2], Activation::Gelu, r);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut inputs: Vec<(&str, Tensor<f64>)> = vec![("x", random(r, &[4, 3]))];
    for n in &names {
        inputs.push((n.as_str(), store.get(n).unwrap().clone()));
    }
    out.push(grad_check("mlp", &inputs, eps, tolerance, |t, v| {
        for (n, &var) in names.iter().zip(&v[1..]) {
            t.bind(n, var);
        }
        mlp.forward(t, &ParamStore::new(), v[0])
    })?);
    Ok(out)
}
