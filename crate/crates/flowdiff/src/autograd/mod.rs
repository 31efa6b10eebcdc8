//! Reverse-mode automatic differentiation on an eager tape.
//!
//! A [`Graph`] records every operation as it executes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients into every node that (transitively) depends on a
//! trainable parameter. Parameters themselves live outside the graph in a
//! [`Params`] store; a graph binds them as leaf nodes on first use and
//! copies gradients back out after the backward pass.
//!
//! The op set is exactly what the models in this crate need: convolution,
//! group norm, the differentiable warping/resampling kernels, and a handful
//! of pointwise and reduction ops. Every op ships a `backward` that is
//! finite-difference-checked in the test suite.

pub mod ops;

use std::collections::HashMap;

use crate::tensor::Tensor;

pub use ops::OpImpl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter store. Insertion order is the canonical order used by
/// optimizers and checkpoints, so iteration is always deterministic.
#[derive(Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.trainable.push(true);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    /// Toggle every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, on: bool) {
        for i in 0..self.names.len() {
            if self.names[i].starts_with(prefix) {
                self.trainable[i] = on;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Order-stable fingerprint of parameter values, used by tests that
    /// assert a phase left a component untouched.
    pub fn checksum(&self, prefix: &str) -> f64 {
        let mut acc = 0.0f64;
        for (n, v) in self.names.iter().zip(&self.values) {
            if n.starts_with(prefix) {
                for (i, &x) in v.data().iter().enumerate() {
                    acc += (x as f64) * ((i % 97 + 1) as f64);
                }
            }
        }
        acc
    }
}

struct Node {
    op: Option<Box<dyn OpImpl>>,
    parents: Vec<NodeId>,
    needs_grad: bool,
}

/// Eager autodiff tape. One graph per forward pass; build, read values,
/// call `backward` once, then drop it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    bound: HashMap<ParamId, NodeId>,
    param_nodes: Vec<(ParamId, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor that never needs gradients (inputs, noise draws).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(None, vec![], value, false)
    }

    /// Insert a leaf that accumulates a gradient (used directly by tests;
    /// models go through [`Graph::param`]).
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.push(None, vec![], value, needs_grad)
    }

    /// Bind a parameter as a leaf node, memoized per graph so repeated use
    /// of the same parameter accumulates into one gradient slot.
    pub fn param(&mut self, params: &Params, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let node = self.push(
            None,
            vec![],
            params.value(id).clone(),
            params.is_trainable(id),
        );
        self.bound.insert(id, node);
        self.param_nodes.push((id, node));
        node
    }

    pub fn apply(&mut self, op: Box<dyn OpImpl>, parents: &[NodeId]) -> NodeId {
        let inputs: Vec<&Tensor> = parents.iter().map(|&p| &self.values[p.0]).collect();
        let value = op.forward(&inputs);
        let needs = parents.iter().any(|&p| self.nodes[p.0].needs_grad);
        self.push(Some(op), parents.to_vec(), value, needs)
    }

    fn push(
        &mut self,
        op: Option<Box<dyn OpImpl>>,
        parents: Vec<NodeId>,
        value: Tensor,
        needs_grad: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            parents,
            needs_grad,
        });
        self.values.push(value);
        self.grads.push(None);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Reverse pass from a scalar root. Gradients land on every node with
    /// `needs_grad`; fetch them with [`Graph::grad`] or push parameter
    /// gradients out with [`Graph::accumulate_param_grads`].
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.values[root.0].shape()
        );
        if !self.nodes[root.0].needs_grad {
            return;
        }
        self.grads[root.0] = Some(Tensor::filled(&[1], 1.0));

        for i in (0..=root.0).rev() {
            if self.nodes[i].op.is_none() {
                continue;
            }
            let Some(grad_out) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.values[p.0]).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p.0].needs_grad)
                .collect();
            let op = node.op.as_ref().unwrap();
            let parent_grads = op.backward(&inputs, &self.values[i], &grad_out, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());

            let parents = node.parents.clone();
            for (p, g) in parents.into_iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                assert_eq!(
                    g.shape(),
                    self.values[p.0].shape(),
                    "gradient shape mismatch from op"
                );
                match &mut self.grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
    }

    /// Add each bound parameter's node gradient into the store.
    pub fn accumulate_param_grads(&self, params: &mut Params) {
        for &(pid, nid) in &self.param_nodes {
            if let Some(g) = &self.grads[nid.0] {
                params.grad_mut(pid).add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_are_ordered_and_named() {
        let mut p = Params::new();
        let a = p.add("enc.w", Tensor::zeros(&[2, 2]));
        let b = p.add("dec.w", Tensor::zeros(&[3]));
        assert_eq!(p.name(a), "enc.w");
        assert_eq!(p.id("dec.w"), Some(b));
        assert_eq!(p.count_scalars(""), 7);
        assert_eq!(p.count_scalars("enc."), 4);
    }

    #[test]
    fn trainable_prefix_toggles() {
        let mut p = Params::new();
        let a = p.add("enc.w", Tensor::zeros(&[1]));
        let b = p.add("dec.w", Tensor::zeros(&[1]));
        p.set_trainable_prefix("enc.", false);
        assert!(!p.is_trainable(a));
        assert!(p.is_trainable(b));
    }

    #[test]
    fn constants_do_not_need_grad() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled(&[2], 3.0));
        assert!(!g.needs_grad(c));
    }

    #[test]
    fn param_binding_is_memoized() {
        let mut p = Params::new();
        let id = p.add("w", Tensor::filled(&[2], 1.0));
        let mut g = Graph::new();
        let n1 = g.param(&p, id);
        let n2 = g.param(&p, id);
        assert_eq!(n1, n2);
    }
}
