//! Named parameters and the small layer vocabulary the model is built from.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
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

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Replaces every value from `entries`; names and shapes must match exactly.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                entries.len()
            )));
        }
        for (name, t) in entries {
            let slot = self
                .by_name_mut(&name)
                .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter {name}")))?;
            if slot.shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

/// Parameters recorded as leaves on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn bind(store: &ParamStore, tape: &mut Tape, requires_grad: bool) -> Self {
        let vars = store.values.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
        Self { vars }
    }

    /// Wraps leaves already on a tape, one per store entry in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

/// `y = x·W + b` with `W: [in×out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn num_params(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add_row(y, p.var(self.b))
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let y = tape.mul_row(y, p.var(self.gamma))?;
        tape.add_row(y, p.var(self.beta))
    }
}

/// Fully-connected stack with rectifiers between layers (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect();
        Self { layers }
    }

    pub fn num_params(dims: &[usize]) -> usize {
        dims.windows(2).map(|d| Linear::num_params(d[0], d[1])).sum()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Fixed 2-D sinusoidal codes for a `rows × cols` grid, `[rows·cols × dim]`.
/// The first half of the channels encodes the row, the second half the column.
pub fn sinusoidal_grid(rows: usize, cols: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            let y = (r as f64 + 0.5) / rows as f64;
            let x = (c as f64 + 0.5) / cols as f64;
            let mut row = sinusoid(y, half);
            row.extend(sinusoid(x, dim - half));
            data.extend(row);
        }
    }
    Tensor::new(vec![rows * cols, dim], data).expect("consistent shape")
}

/// Sine/cosine embedding of a normalized scalar into `dim` channels with
/// geometrically spaced frequencies (temperature 10000, scale 2π).
pub fn sinusoid(value: f64, dim: usize) -> Vec<f64> {
    let scaled = value * std::f64::consts::TAU;
    (0..dim)
        .map(|i| {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / dim.max(1) as f64);
            let a = scaled / freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}
