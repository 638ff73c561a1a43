//! Reverse-mode differentiation over a recorded sequence of per-site operations.
//!
//! Every node holds a `n_sites x channels` row-major feature block on one fixed
//! active set. The graph can be differentiated once; afterwards it is consumed.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{conv_backward, conv_forward, ConvKernel, KernelGrad, Rulebook};
use crate::error::{Error, Result};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug)]
enum Op {
    Input,
    Conv {
        input: NodeId,
        kernel: ConvKernel,
        rulebook: Option<Arc<Rulebook>>,
        param: Option<ParamId>,
    },
    Relu {
        input: NodeId,
    },
    Softmax {
        input: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    channels: usize,
    op: Op,
}

#[derive(Debug)]
pub struct Graph {
    n_sites: usize,
    nodes: Vec<Node>,
    consumed: bool,
}

#[derive(Debug, Default)]
pub struct Gradients {
    /// Accumulated kernel gradients keyed by the id given when the conv was recorded.
    pub params: BTreeMap<ParamId, KernelGrad>,
    /// Gradients reaching input nodes.
    pub inputs: BTreeMap<NodeId, Vec<f64>>,
}

impl Graph {
    pub fn new(n_sites: usize) -> Self {
        Self {
            n_sites,
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Lifecycle(
                "graph already consumed by backward".into(),
            ));
        }
        Ok(())
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::Shape(format!("no node {id} in graph")))
    }

    fn push(&mut self, value: Vec<f64>, channels: usize, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            channels,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, channels: usize, values: Vec<f64>) -> Result<NodeId> {
        self.live()?;
        if values.len() != self.n_sites * channels {
            return Err(Error::Shape(format!(
                "input of {} values for {} sites x {channels} channels",
                values.len(),
                self.n_sites
            )));
        }
        Ok(self.push(values, channels, Op::Input))
    }

    pub fn conv(
        &mut self,
        x: NodeId,
        kernel: &ConvKernel,
        rulebook: Option<&Arc<Rulebook>>,
        param: Option<ParamId>,
    ) -> Result<NodeId> {
        self.live()?;
        let node = self.node(x)?;
        if node.channels != kernel.in_channels() {
            return Err(Error::Shape(format!(
                "node has {} channels, kernel expects {}",
                node.channels,
                kernel.in_channels()
            )));
        }
        let value = conv_forward(kernel, rulebook.map(|r| r.as_ref()), &node.value)?;
        Ok(self.push(
            value,
            kernel.out_channels(),
            Op::Conv {
                input: x,
                kernel: kernel.clone(),
                rulebook: rulebook.cloned(),
                param,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.live()?;
        let node = self.node(x)?;
        let value = node.value.iter().map(|&v| v.max(0.0)).collect();
        let channels = node.channels;
        Ok(self.push(value, channels, Op::Relu { input: x }))
    }

    /// Row-wise softmax over channels.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.live()?;
        let node = self.node(x)?;
        let c = node.channels;
        let mut value = node.value.clone();
        for row in value.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(value, c, Op::Softmax { input: x }))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].channels
    }

    /// Propagates `upstream` (gradient of a scalar loss w.r.t. the listed nodes) back
    /// to every kernel and input. Consumes the graph.
    pub fn backward(&mut self, upstream: &[(NodeId, Vec<f64>)]) -> Result<Gradients> {
        self.live()?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (id, g) in upstream {
            let node = self.node(*id)?;
            if g.len() != node.value.len() {
                return Err(Error::Shape(format!(
                    "upstream gradient for node {id} has {} values, node has {}",
                    g.len(),
                    node.value.len()
                )));
            }
            accumulate(&mut grads[*id], g);
        }
        self.consumed = true;

        let mut out = Gradients::default();
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {
                    out.inputs.insert(id, g);
                }
                Op::Relu { input } => {
                    let x = &self.nodes[*input].value;
                    let gi: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*input], &gi);
                }
                Op::Softmax { input } => {
                    let c = node.channels;
                    let mut gi = vec![0.0; g.len()];
                    for ((gr, yr), out_r) in
                        g.chunks(c).zip(node.value.chunks(c)).zip(gi.chunks_mut(c))
                    {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out_r[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads[*input], &gi);
                }
                Op::Conv {
                    input,
                    kernel,
                    rulebook,
                    param,
                } => {
                    let x = &self.nodes[*input].value;
                    let (gi, kg) = conv_backward(kernel, rulebook.as_deref(), x, &g)?;
                    accumulate(&mut grads[*input], &gi);
                    if let Some(p) = param {
                        match out.params.get_mut(p) {
                            Some(acc) => {
                                add_into(&mut acc.weights, &kg.weights);
                                if let (Some(a), Some(b)) = (acc.bias.as_mut(), kg.bias.as_ref()) {
                                    add_into(a, b);
                                }
                            }
                            None => {
                                out.params.insert(*p, kg);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`Graph::backward`].
pub fn backward(graph: &mut Graph, upstream: &[(NodeId, Vec<f64>)]) -> Result<Gradients> {
    graph.backward(upstream)
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => add_into(acc, g),
        None => *slot = Some(g.to_vec()),
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
