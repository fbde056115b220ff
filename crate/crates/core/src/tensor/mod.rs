//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node whose parents have
//! smaller indices, so insertion order is a topological order and
//! [`Graph::backward`] simply walks the tape in reverse. Values are
//! immutable [`Tensor`]s; gradients accumulate additively when a node feeds
//! several consumers.

mod kernels;
mod ops;

use crate::error::{Error, Result};

pub use ops::{sinusoidal_encoding, AttentionVars};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Rounds every entry to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: ops::Op,
}

/// Tape of operations with saved state for the backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward state. Parameters added to it
    /// still work as inputs, but [`Graph::backward`] is an error.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(value, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: ops::Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, name: &str, value: Tensor, op: ops::Op) -> Result<Var> {
        if let Some(bad) = value.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(name, format!("forward produced {bad}")));
        }
        let requires_grad = self.grad_enabled && op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { ops::Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if `v`
    /// requires one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    /// Back-propagates from a scalar node. Leaf gradients are stored on the
    /// leaves and can be read with [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Config("backward on an inference graph".into()));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            node.op.backward(&self.nodes, &node.value, &g, &mut grads)?;
            if matches!(node.op, ops::Op::Leaf) {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::numeric("backward", format!("gradient contains {bad}")));
                }
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }

    /// Clears stored leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}

#[cfg(test)]
mod tests;
