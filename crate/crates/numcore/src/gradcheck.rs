//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::eval::{backward, forward, Values};
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Probe at most this many components per leaf, chosen by `seed`.
    /// `None` probes every component.
    pub max_probes_per_leaf: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_probes_per_leaf: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafReport {
    pub name: String,
    /// Max over probed components of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    pub probed: usize,
    /// Components skipped because a perturbation crossed a relu kink.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub leaves: Vec<LeafReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_err <= self.tolerance)
    }

    pub fn skipped(&self) -> usize {
        self.leaves.iter().map(|l| l.skipped).sum()
    }
}

pub fn grad_check<S: AsRef<str>>(
    graph: &Graph,
    bindings: &BTreeMap<String, Tensor<f64>>,
    wrt: &[S],
    scalar_output: &str,
    tolerance: f64,
) -> Result<GradCheckReport> {
    grad_check_with(graph, bindings, wrt, scalar_output, tolerance, &GradCheckOptions::default())
}

fn relu_inputs(graph: &Graph) -> Vec<NodeId> {
    graph
        .nodes()
        .iter()
        .filter(|n| matches!(n.op, Op::Relu))
        .map(|n| n.inputs[0])
        .collect()
}

fn same_branches(relus: &[NodeId], a: &Values<f64>, b: &Values<f64>) -> bool {
    relus.iter().all(|&id| {
        a.get(id)
            .data()
            .iter()
            .zip(b.get(id).data())
            .all(|(&x, &y)| (x > 0.0) == (y > 0.0))
    })
}

/// Next value of a splitmix64 stream; only used to pick probe positions.
fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn probe_positions(len: usize, limit: Option<usize>, state: &mut u64) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut idx: Vec<usize> = (0..len).collect();
            for i in 0..k {
                let j = i + (splitmix(state) % (len - i) as u64) as usize;
                idx.swap(i, j);
            }
            let mut picked = idx[..k].to_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

pub fn grad_check_with<S: AsRef<str>>(
    graph: &Graph,
    bindings: &BTreeMap<String, Tensor<f64>>,
    wrt: &[S],
    scalar_output: &str,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let output = graph
        .output_id(scalar_output)
        .ok_or_else(|| NumError::UnknownOutput(scalar_output.to_string()))?;
    let ids = wrt
        .iter()
        .map(|n| graph.leaf_id(n.as_ref()).ok_or_else(|| NumError::WrtAbsent(n.as_ref().to_string())))
        .collect::<Result<Vec<_>>>()?;
    let base = forward(graph, bindings)?;
    let analytic = backward(graph, &base, output, &ids)?;
    let relus = relu_inputs(graph);

    let mut state = opts.seed;
    let mut work = bindings.clone();
    let mut leaves = Vec::with_capacity(ids.len());
    for (name, grad) in wrt.iter().map(AsRef::as_ref).zip(&analytic) {
        let original = bindings
            .get(name)
            .ok_or_else(|| NumError::UnboundLeaf(name.to_string()))?
            .clone();
        let mut report = LeafReport {
            name: name.to_string(),
            max_rel_err: 0.0,
            probed: 0,
            skipped: 0,
        };
        for pos in probe_positions(original.len(), opts.max_probes_per_leaf, &mut state) {
            let mut eval_at = |delta: f64| -> Result<Values<f64>> {
                let mut data = original.data().to_vec();
                data[pos] += delta;
                work.insert(name.to_string(), Tensor::new(original.dims().to_vec(), data)?);
                forward(graph, &work)
            };
            let plus = eval_at(opts.step)?;
            let minus = eval_at(-opts.step)?;
            if !same_branches(&relus, &base, &plus) || !same_branches(&relus, &base, &minus) {
                log::warn!("grad_check: `{name}`[{pos}] straddles a relu kink, skipped");
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.scalar(output) - minus.scalar(output)) / (2.0 * opts.step);
            let err = (grad.data()[pos] - numeric).abs() / numeric.abs().max(1.0);
            report.max_rel_err = report.max_rel_err.max(err);
            report.probed += 1;
        }
        work.insert(name.to_string(), original);
        leaves.push(report);
    }
    Ok(GradCheckReport { tolerance, leaves })
}
