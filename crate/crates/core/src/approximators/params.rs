use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Graph, Matrix, Var};

/// One entry of the named-shape manifest that describes a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ParamShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector plus its manifest. Tensors are stored row-major in
/// manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    shapes: Vec<ParamShape>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

/// Graph handles for every tensor of a [`ParamSet`], in manifest order.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, index: usize) -> Var {
        self.vars[index]
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            shapes: Vec::new(),
            offsets: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Appends a tensor filled by `init` and returns its manifest index.
    pub fn push(&mut self, name: &str, rows: usize, cols: usize, mut init: impl FnMut() -> f64) -> usize {
        self.offsets.push(self.data.len());
        self.data.extend((0..rows * cols).map(|_| init()));
        self.shapes.push(ParamShape {
            name: name.to_string(),
            rows,
            cols,
        });
        self.shapes.len() - 1
    }

    /// Uniform `[-bound, bound]` initializer.
    pub fn push_uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> usize {
        self.push(name, rows, cols, || rng.random_range(-bound..=bound))
    }

    pub fn from_parts(shapes: Vec<ParamShape>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shapes.iter().map(ParamShape::len).sum();
        if expected != data.len() {
            return Err(Error::schema(format!(
                "parameter manifest describes {expected} values, found {}",
                data.len()
            )));
        }
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for s in &shapes {
            offsets.push(at);
            at += s.len();
        }
        Ok(ParamSet { shapes, offsets, data })
    }

    pub fn manifest(&self) -> &[ParamShape] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, index: usize) -> Matrix {
        let s = &self.shapes[index];
        let off = self.offsets[index];
        Matrix::from_shape_vec((s.rows, s.cols), self.data[off..off + s.len()].to_vec()).expect("manifest shape")
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        let off = self.offsets[index];
        let len = self.shapes[index].len();
        &mut self.data[off..off + len]
    }

    /// Registers every tensor as a graph leaf; `trainable` controls whether
    /// adjoints are accumulated for them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = (0..self.shapes.len())
            .map(|i| {
                let t = self.tensor(i);
                if trainable {
                    g.variable(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Flattens the adjoints of `bound` into manifest order; tensors that the
    /// loss does not touch contribute zeros.
    pub fn flat_grad(&self, grads: &Gradients, bound: &BoundParams) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for (i, &v) in bound.vars.iter().enumerate() {
            if let Some(gm) = grads.get(v) {
                let off = self.offsets[i];
                for (dst, src) in out[off..off + self.shapes[i].len()].iter_mut().zip(gm.iter()) {
                    *dst = *src;
                }
            }
        }
        out
    }

    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.shapes == other.shapes
    }
}

/// `target <- rho * online + (1 - rho) * target`, elementwise.
pub fn soft_update(target: &mut [f64], online: &[f64], rho: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::contract(format!(
            "soft update shape mismatch: target {} vs online {}",
            target.len(),
            online.len()
        )));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::contract(format!("soft update rate {rho} outside (0, 1]")));
    }
    if rho == 1.0 {
        target.copy_from_slice(online);
        return Ok(());
    }
    for (t, &o) in target.iter_mut().zip(online) {
        *t = rho * o + (1.0 - rho) * *t;
    }
    Ok(())
}
