//! Parameter storage and the small layer vocabulary shared by every module.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                current.shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                v.data_mut().fill(0.0);
            }
        }
    }
}

/// Uniform Glorot initialisation.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("sized buffer")
}

/// Affine map `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Linear layers with ReLU between them (none after the last one).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width including input and output.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x);
            if i != last {
                x = g.relu(x);
            }
        }
        x
    }
}

/// Row-wise layer normalisation with learned gain and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            shift: store.add(format!("{name}.shift"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, Self::EPS);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }
}
