use std::collections::{BTreeMap, HashMap};

use crate::error::{NumError, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::ops;
use crate::tensor::{Element, Tensor};

/// Source of leaf values, looked up by name.
pub trait Bindings<E> {
    fn lookup(&self, name: &str) -> Option<&Tensor<E>>;
}

impl<E> Bindings<E> for BTreeMap<String, Tensor<E>> {
    fn lookup(&self, name: &str) -> Option<&Tensor<E>> {
        self.get(name)
    }
}

impl<E> Bindings<E> for HashMap<String, Tensor<E>> {
    fn lookup(&self, name: &str) -> Option<&Tensor<E>> {
        self.get(name)
    }
}

/// Every node's value from one forward pass.
#[derive(Clone)]
pub struct Values<E> {
    values: Vec<Tensor<E>>,
}

impl<E: Element> Values<E> {
    pub fn get(&self, id: NodeId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> E {
        self.values[id.0].item()
    }
}

/// Runs every node once in insertion order.
pub fn forward<E: Element, B: Bindings<E> + ?Sized>(graph: &Graph, bindings: &B) -> Result<Values<E>> {
    let mut values: Vec<Tensor<E>> = Vec::with_capacity(graph.len());
    for (idx, node) in graph.nodes().iter().enumerate() {
        let value = match &node.op {
            Op::Leaf(name) => bindings
                .lookup(name)
                .ok_or_else(|| NumError::UnboundLeaf(name.clone()))?
                .clone(),
            Op::Const(t) => t.cast(),
            op => {
                let inputs: Vec<&Tensor<E>> = node.inputs.iter().map(|i| &values[i.0]).collect();
                ops::forward(idx, op, &inputs)?
            }
        };
        if !value.is_finite() {
            return Err(NumError::NonFinite {
                node: idx,
                op: node.op.name(),
            });
        }
        values.push(value);
    }
    Ok(Values { values })
}

/// Evaluates the graph and returns its named outputs.
pub fn evaluate<E: Element, B: Bindings<E> + ?Sized>(
    graph: &Graph,
    bindings: &B,
) -> Result<BTreeMap<String, Tensor<E>>> {
    let values = forward(graph, bindings)?;
    Ok(graph
        .outputs()
        .iter()
        .map(|(name, &id)| (name.clone(), values.get(id).clone()))
        .collect())
}

/// Reverse pass from the scalar node `output` to the leaves in `wrt`.
///
/// Only nodes on a path from a requested leaf to `output` are visited.
/// Leaves that do not influence the output get zero gradients.
pub fn backward<E: Element>(
    graph: &Graph,
    values: &Values<E>,
    output: NodeId,
    wrt: &[NodeId],
) -> Result<Vec<Tensor<E>>> {
    let out_dims = values.get(output).dims();
    if out_dims != [1] {
        return Err(NumError::NonScalarOutput {
            name: format!("node {}", output.0),
            dims: out_dims.to_vec(),
        });
    }
    let n = output.0 + 1;
    let mut needed = vec![false; n];
    for id in wrt {
        if id.0 < n {
            needed[id.0] = true;
        }
    }
    for (idx, node) in graph.nodes()[..n].iter().enumerate() {
        if node.inputs.iter().any(|i| needed[i.0]) {
            needed[idx] = true;
        }
    }

    let mut grads: Vec<Option<Vec<E>>> = vec![None; n];
    grads[output.0] = Some(vec![E::one()]);
    for idx in (0..n).rev() {
        if !needed[idx] {
            continue;
        }
        let node = &graph.nodes()[idx];
        if node.inputs.is_empty() {
            continue;
        }
        let Some(g) = grads[idx].take() else {
            continue;
        };
        let inputs: Vec<&Tensor<E>> = node.inputs.iter().map(|i| values.get(*i)).collect();
        let input_grads = ops::backward(&node.op, &inputs, values.get(NodeId(idx)), &g);
        for (input, dx) in node.inputs.iter().zip(input_grads) {
            let (Some(dx), true) = (dx, needed[input.0]) else {
                continue;
            };
            match &mut grads[input.0] {
                Some(acc) => acc.iter_mut().zip(&dx).for_each(|(a, &d)| *a = *a + d),
                slot => *slot = Some(dx),
            }
        }
    }

    Ok(wrt
        .iter()
        .map(|id| {
            let dims = values.get(*id).dims().to_vec();
            let data = grads
                .get(id.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![E::zero(); values.get(*id).len()]);
            Tensor::from_parts(dims, data)
        })
        .collect())
}

/// Forward values together with gradients of one scalar output.
pub struct ValueAndGrad<E> {
    pub values: Values<E>,
    pub grads: BTreeMap<String, Tensor<E>>,
}

pub fn value_and_gradients<E: Element, B: Bindings<E> + ?Sized, S: AsRef<str>>(
    graph: &Graph,
    bindings: &B,
    wrt: &[S],
    scalar_output: &str,
) -> Result<ValueAndGrad<E>> {
    let output = graph
        .output_id(scalar_output)
        .ok_or_else(|| NumError::UnknownOutput(scalar_output.to_string()))?;
    let ids = wrt
        .iter()
        .map(|name| {
            graph
                .leaf_id(name.as_ref())
                .ok_or_else(|| NumError::WrtAbsent(name.as_ref().to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let values = forward(graph, bindings)?;
    let out_dims = values.get(output).dims();
    if out_dims != [1] {
        return Err(NumError::NonScalarOutput {
            name: scalar_output.to_string(),
            dims: out_dims.to_vec(),
        });
    }
    let tensors = backward(graph, &values, output, &ids)?;
    let grads = wrt
        .iter()
        .map(|s| s.as_ref().to_string())
        .zip(tensors)
        .collect();
    Ok(ValueAndGrad { values, grads })
}

/// Exact reverse-mode gradients of a named scalar output.
pub fn gradients<E: Element, B: Bindings<E> + ?Sized, S: AsRef<str>>(
    graph: &Graph,
    bindings: &B,
    wrt: &[S],
    scalar_output: &str,
) -> Result<BTreeMap<String, Tensor<E>>> {
    Ok(value_and_gradients(graph, bindings, wrt, scalar_output)?.grads)
}
