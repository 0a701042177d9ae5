//! Parameterized building blocks that bind named parameters onto a tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::{ParamStore, Scalar, Tape, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    /// Registers `name.w` (`[din, dout]`) and `name.b`, uniform in `±√(1/din)`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / din as f64).sqrt();
        store.init_uniform(&format!("{name}.w"), &[din, dout], bound, rng);
        store.init_uniform(&format!("{name}.b"), &[dout], bound, rng);
        Self { name: name.to_string(), din, dout, bias: true }
    }

    /// Same as [`Linear::new`] with all values zero.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Self {
        store.insert(format!("{name}.w"), super::Tensor::zeros(&[din, dout]));
        store.insert(format!("{name}.b"), super::Tensor::zeros(&[dout]));
        Self { name: name.to_string(), din, dout, bias: true }
    }

    pub fn without_bias<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / din as f64).sqrt();
        store.init_uniform(&format!("{name}.w"), &[din, dout], bound, rng);
        Self { name: name.to_string(), din, dout, bias: false }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, &format!("{}.w", self.name))?;
        let b = if self.bias { Some(tape.param(store, &format!("{}.b", self.name))?) } else { None };
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        store.insert(format!("{name}.gamma"), super::Tensor::full(&[dim], T::one()));
        store.insert(format!("{name}.beta"), super::Tensor::zeros(&[dim]));
        Self { name: name.to_string(), dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, &format!("{}.gamma", self.name))?;
        let b = tape.param(store, &format!("{}.beta", self.name))?;
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Multilayer perceptron; the activation is applied between layers, not after the last.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    /// Zeroes the final layer so the network initially outputs exactly zero.
    pub fn zero_last<T: Scalar>(&self, store: &mut ParamStore<T>) {
        if let Some(last) = self.layers.last() {
            for suffix in ["w", "b"] {
                if let Some(t) = store.get_mut(&format!("{}.{suffix}", last.name)) {
                    t.data_mut().iter_mut().for_each(|x| *x = T::zero());
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, store, x)?;
            if i + 1 < n {
                x = self.activation.apply(tape, x);
            }
        }
        Ok(x)
    }
}
