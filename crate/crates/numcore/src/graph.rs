use std::collections::{BTreeMap, HashMap};

use crate::tensor::{Element, Tensor};

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Shapes are checked when the graph is evaluated.
#[derive(Clone, Debug)]
pub enum Op {
    /// Named input, bound at evaluation time.
    Leaf(String),
    /// Literal stored at 64-bit and cast to the evaluation precision.
    Const(Tensor<f64>),
    /// `a + b`; `b` may broadcast over the leading axes of `a`.
    Add,
    /// `a - b` with equal dims.
    Sub,
    /// `a * b` elementwise; `b` may broadcast like [`Op::Add`].
    Mul,
    Scale(f64),
    /// `[m, k] x [k, n]`.
    MatMul,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        axis: usize,
    },
    /// `x: [c_in, h, w]`, `k: [c_out, c_in, kh, kw]`, `b: [c_out]`, "same" padding.
    Conv2d {
        stride: usize,
    },
    /// `x: [c_in, h, w]`, `k: [c_in, c_out, kh, kw]`, `b: [c_out]`, full output
    /// of size `(h - 1) * stride + kh`.
    ConvTranspose2d {
        stride: usize,
    },
    /// Normalizes over the last axis; gamma and beta have the last axis' size.
    LayerNorm {
        eps: f64,
    },
    /// Over the last axis.
    Softmax,
    /// Over the last axis.
    LogSoftmax,
    Relu,
    /// Rows of a `[vocab, dim]` table.
    Embedding {
        ids: Vec<usize>,
    },
    Sum,
    Mean,
    /// `sum((a - b)^2)` as a `[1]` tensor.
    SqErr,
    /// Negative log-likelihood of `target` under blank-augmented alignments of
    /// a `[frames, classes]` log-probability matrix.
    Ctc {
        target: Vec<usize>,
        blank: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const(_) => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Permute(_) => "permute",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Relu => "relu",
            Op::Embedding { .. } => "embedding",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SqErr => "sq_err",
            Op::Ctc { .. } => "ctc",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// An acyclic computation graph.
///
/// Nodes can only reference nodes created before them, so insertion order is
/// a topological order. Leaves are deduplicated by name: asking for the same
/// leaf twice returns the same node and gradients accumulate across uses.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf names in sorted order.
    pub fn leaf_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.leaves.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn outputs(&self) -> &BTreeMap<String, NodeId> {
        &self.outputs
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    /// Names `node` as an output returned by [`crate::evaluate`].
    pub fn mark_output(&mut self, name: impl Into<String>, node: NodeId) {
        self.outputs.insert(name.into(), node);
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { op, inputs });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf(name.to_string()), vec![]);
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn constant<E: Element>(&mut self, value: &Tensor<E>) -> NodeId {
        self.push(Op::Const(value.cast()), vec![])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(factor), vec![a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        self.push(Op::Permute(axes.to_vec()), vec![a])
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> NodeId {
        self.push(Op::Reshape(dims.to_vec()), vec![a])
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice { axis, start, len }, vec![a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat { axis }, parts.to_vec())
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize) -> NodeId {
        self.push(Op::Conv2d { stride }, vec![x, kernel, bias])
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> NodeId {
        self.push(Op::ConvTranspose2d { stride }, vec![x, kernel, bias])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta])
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax, vec![a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax, vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu, vec![a])
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        self.push(Op::Embedding { ids: ids.to_vec() }, vec![table])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean, vec![a])
    }

    pub fn sq_err(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::SqErr, vec![a, b])
    }

    pub fn ctc_loss(&mut self, log_probs: NodeId, target: &[usize], blank: usize) -> NodeId {
        self.push(
            Op::Ctc {
                target: target.to_vec(),
                blank,
            },
            vec![log_probs],
        )
    }
}
