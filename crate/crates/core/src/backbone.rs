//! Miniature segmentation network: a stack of separable (or standard) sparse
//! blocks followed by a pointwise classifier.
//!
//! All trainable values live in one flat vector so optimizers and the teacher
//! average can treat the model as a plain array.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse_conv::{ConvKernel, Gradients, Graph, KernelKind, LayerSpec, NodeId, Rulebook};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Sdsc,
    Standard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub input_channels: usize,
    pub kernel_size: usize,
    /// Output channels of each block.
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub block: BlockKind,
    #[serde(default)]
    pub depthwise_bias: bool,
    #[serde(default = "yes")]
    pub pointwise_bias: bool,
}

fn yes() -> bool {
    true
}

/// Shape of one kernel inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSlot {
    pub kind: KernelKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub bias: bool,
    /// Start of the weights; the bias follows them.
    pub offset: usize,
}

impl KernelSlot {
    pub fn weight_len(&self) -> usize {
        crate::sparse_conv::weight_len(
            self.kind,
            self.in_channels,
            self.out_channels,
            self.kernel_size,
        )
    }

    pub fn len(&self) -> usize {
        self.weight_len() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Topology {
    /// Four blocks of 16, 32, 64 and 64 channels with 3x3x3 kernels.
    pub fn mini(input_channels: usize, classes: usize, block: BlockKind) -> Self {
        Self {
            input_channels,
            kernel_size: 3,
            hidden: vec![16, 32, 64, 64],
            classes,
            block,
            depthwise_bias: false,
            pointwise_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.classes == 0 {
            return Err(Error::Validation(
                "input channels and classes must be >= 1".into(),
            ));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Validation(
                "need at least one block, each with >= 1 channel".into(),
            ));
        }
        Ok(())
    }

    /// Width of the embedding used by the contrastive loss (last block output).
    pub fn embedding_dim(&self) -> usize {
        *self.hidden.last().expect("validated topology has blocks")
    }

    /// Layer-level description for cost accounting; separable blocks count as one layer.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::with_capacity(self.hidden.len() + 1);
        let mut m = self.input_channels;
        for &n in &self.hidden {
            out.push(match self.block {
                BlockKind::Sdsc => LayerSpec::Sdsc {
                    in_channels: m,
                    out_channels: n,
                    kernel_size: self.kernel_size,
                    depthwise_bias: self.depthwise_bias,
                    pointwise_bias: self.pointwise_bias,
                },
                BlockKind::Standard => LayerSpec::Standard {
                    in_channels: m,
                    out_channels: n,
                    kernel_size: self.kernel_size,
                    bias: self.pointwise_bias,
                },
            });
            m = n;
        }
        out.push(LayerSpec::Pointwise {
            in_channels: m,
            out_channels: self.classes,
            bias: true,
        });
        out
    }

    /// Every kernel in execution order with its place in the flat parameter vector.
    pub fn slots(&self) -> Vec<KernelSlot> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |kind, m, n, k, bias| {
            let s = KernelSlot {
                kind,
                in_channels: m,
                out_channels: n,
                kernel_size: k,
                bias,
                offset,
            };
            offset += s.len();
            out.push(s);
        };
        let mut m = self.input_channels;
        for &n in &self.hidden {
            match self.block {
                BlockKind::Sdsc => {
                    push(
                        KernelKind::Depthwise,
                        m,
                        m,
                        self.kernel_size,
                        self.depthwise_bias,
                    );
                    push(KernelKind::Pointwise, m, n, 1, self.pointwise_bias);
                }
                BlockKind::Standard => push(
                    KernelKind::Standard,
                    m,
                    n,
                    self.kernel_size,
                    self.pointwise_bias,
                ),
            }
            m = n;
        }
        push(KernelKind::Pointwise, m, self.classes, 1, true);
        out
    }

    pub fn param_count(&self) -> usize {
        self.slots().iter().map(KernelSlot::len).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        self.validate()?;
        let mut params = Vec::with_capacity(self.param_count());
        for s in self.slots() {
            let k = ConvKernel::glorot(
                s.kind,
                s.in_channels,
                s.out_channels,
                s.kernel_size,
                s.bias,
                rng,
            )?;
            params.extend_from_slice(k.weights());
            if let Some(b) = k.bias() {
                params.extend_from_slice(b);
            }
        }
        Ok(params)
    }

    pub fn kernels(&self, params: &[f64]) -> Result<Vec<ConvKernel>> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a topology of {}",
                params.len(),
                self.param_count()
            )));
        }
        self.slots()
            .iter()
            .map(|s| {
                let w = params[s.offset..s.offset + s.weight_len()].to_vec();
                let b = s
                    .bias
                    .then(|| params[s.offset + s.weight_len()..s.offset + s.len()].to_vec());
                ConvKernel::new(s.kind, s.in_channels, s.out_channels, s.kernel_size, w, b)
            })
            .collect()
    }

    /// Flattens per-kernel gradients (keyed by kernel index) into the parameter layout.
    pub fn flatten_grads(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; self.param_count()];
        for (i, s) in self.slots().iter().enumerate() {
            if let Some(g) = grads.params.get(&i) {
                out[s.offset..s.offset + s.weight_len()].copy_from_slice(&g.weights);
                if let Some(b) = &g.bias {
                    out[s.offset + s.weight_len()..s.offset + s.len()].copy_from_slice(b);
                }
            }
        }
        out
    }
}

/// Recorded forward pass of one frame.
#[derive(Debug)]
pub struct Forward {
    pub graph: Graph,
    pub input: NodeId,
    /// Last block output before its activation.
    pub embedding: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

impl Forward {
    pub fn probs(&self) -> &[f64] {
        self.graph.value(self.probs)
    }

    pub fn embeddings(&self) -> &[f64] {
        self.graph.value(self.embedding)
    }
}

/// Runs the network on `features` (`n_sites x input_channels`) over the active set of `rulebook`.
pub fn forward(
    topo: &Topology,
    params: &[f64],
    rulebook: &Arc<Rulebook>,
    features: Vec<f64>,
) -> Result<Forward> {
    topo.validate()?;
    if rulebook.kernel_size() != topo.kernel_size {
        return Err(Error::Shape(format!(
            "rulebook for kernel size {} but topology uses {}",
            rulebook.kernel_size(),
            topo.kernel_size
        )));
    }
    let kernels = topo.kernels(params)?;
    let mut g = Graph::new(rulebook.n_sites());
    let input = g.input(topo.input_channels, features)?;
    let mut x = input;
    let mut embedding = input;
    let mut k = 0;
    let n_blocks = topo.hidden.len();
    for b in 0..n_blocks {
        let pre = match topo.block {
            BlockKind::Sdsc => {
                let d = g.conv(x, &kernels[k], Some(rulebook), Some(k))?;
                let p = g.conv(d, &kernels[k + 1], None, Some(k + 1))?;
                k += 2;
                p
            }
            BlockKind::Standard => {
                let s = g.conv(x, &kernels[k], Some(rulebook), Some(k))?;
                k += 1;
                s
            }
        };
        if b + 1 == n_blocks {
            embedding = pre;
        }
        x = g.relu(pre)?;
    }
    let logits = g.conv(x, &kernels[k], None, Some(k))?;
    let probs = g.softmax(logits)?;
    Ok(Forward {
        graph: g,
        input,
        embedding,
        logits,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn layout_matches_layer_counts() {
        for block in [BlockKind::Sdsc, BlockKind::Standard] {
            let t = Topology::mini(34, 3, block);
            let from_layers: u64 = t.layers().iter().map(LayerSpec::trainable_params).sum();
            assert_eq!(t.param_count() as u64, from_layers);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let p = t.init_params(&mut rng).unwrap();
            assert_eq!(p.len(), t.param_count());
            assert_eq!(t.kernels(&p).unwrap().len(), t.slots().len());
        }
        let sep = Topology::mini(34, 3, BlockKind::Sdsc).param_count();
        let std = Topology::mini(34, 3, BlockKind::Standard).param_count();
        assert!(sep < std);
    }

    #[test]
    fn forward_shapes() {
        use crate::voxel::{CylGridSpec, SparseVoxelTensor, VoxelCoord};
        let grid = CylGridSpec::new(4, 4, 4, 4.0, (0.0, 4.0)).unwrap();
        let t = SparseVoxelTensor::from_entries(
            grid,
            2,
            vec![
                (VoxelCoord::new(0, 0, 0), vec![1.0, 0.0]),
                (VoxelCoord::new(0, 1, 0), vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        let topo = Topology {
            input_channels: 2,
            kernel_size: 3,
            hidden: vec![3, 4],
            classes: 2,
            block: BlockKind::Sdsc,
            depthwise_bias: false,
            pointwise_bias: true,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = topo.init_params(&mut rng).unwrap();
        let rb = Arc::new(Rulebook::build(&t, 3).unwrap());
        let f = forward(&topo, &p, &rb, t.features().to_vec()).unwrap();
        assert_eq!(f.probs().len(), 4);
        assert_eq!(f.embeddings().len(), 8);
        for row in f.probs().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(topo.kernels(&p[1..]).is_err());
    }
}
