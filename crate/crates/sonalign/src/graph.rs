//! Computation graph: records forward ops, replays them in reverse for
//! gradients.
//!
//! Nodes are append-only, so node index order is already a topological
//! order and the backward pass is a single reverse sweep. A `Graph` is
//! confined to one thread while it is being built; tensors inside it are
//! never mutated after recording.

use crate::error::{Error, Result};
use crate::ops::{self, Op};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug)]
pub struct Node {
    pub op: Option<Op>,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub needs_grad: bool,
    pub name: Option<String>,
}

#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: std::collections::HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Record a constant leaf (no gradient).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let needs_grad = value.requires_grad();
        self.push(Node {
            op: None,
            inputs: vec![],
            value,
            needs_grad,
            name: None,
        })
    }

    /// Record a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(Node {
            op: None,
            inputs: vec![],
            value: value.with_grad(),
            needs_grad: true,
            name: Some(name.into()),
        })
    }

    /// Bind a named parameter from a store, reusing the existing leaf if
    /// this graph already bound it. Fan-out through a shared leaf sums
    /// gradients across all uses.
    pub fn bind(&mut self, store: &crate::model::ParamStore, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let value = store.get(name).clone();
        let id = self.param(name, value);
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Apply a primitive op to existing nodes.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let value = ops::forward(&op, &tensors)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(Node {
            op: Some(op),
            inputs: inputs.to_vec(),
            value,
            needs_grad,
            name: None,
        }))
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar loss node. Gradients accumulate by
    /// summation across fan-out, visiting nodes in reverse topological
    /// (insertion) order.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::new(
            self.nodes[loss].value.shape().to_vec(),
            vec![1.0],
        )?);
        for id in (0..=loss).rev() {
            let Some(grad_out) = grads[id].clone() else {
                continue;
            };
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = ops::backward(op, &inputs, &node.value, &grad_out)?;
            for (&input_id, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input_id].needs_grad {
                    continue;
                }
                match &mut grads[input_id] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(GradMap { grads })
    }
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf; zeros if no path to the loss reached it.
    pub fn get_or_zeros(&self, graph: &Graph, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(id).shape()),
        }
    }

    /// Gradients of all named leaves, zeros where no path reached them.
    pub fn named(&self, graph: &Graph) -> std::collections::BTreeMap<String, Tensor> {
        let mut out = std::collections::BTreeMap::new();
        for (id, node) in graph.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                out.insert(name.clone(), self.get_or_zeros(graph, id));
            }
        }
        out
    }
}
