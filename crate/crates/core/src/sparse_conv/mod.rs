//! Submanifold sparse convolutions on cylindrical voxel tensors.
//!
//! Three kernel kinds share one neighbor rulebook:
//!
//! * `Standard`: full `M -> N` spatial kernel, `N * M * D^3` weights.
//! * `Depthwise`: one spatial filter per channel, `M * D^3` weights.
//! * `Pointwise`: `1x1x1` channel mix, `N * M` weights.
//!
//! Spatial kernels are submanifold: the output active set is exactly the input
//! active set and each output sums taps over active neighbors only. The azimuth
//! axis wraps around; radius and height have no neighbors past the grid border.
//! A depthwise kernel followed by a pointwise kernel is the sparse depthwise
//! separable convolution, see [`sdsc`].

mod cost;
mod graph;

pub use cost::{cost, CostReport, LayerSpec};
pub use graph::{backward, Gradients, Graph, NodeId, ParamId};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{SparseVoxelTensor, VoxelCoord};

/// Sites per work item when reducing weight gradients; fixed so sums are reproducible.
const GRAD_CHUNK: usize = 256;
const NO_NEIGHBOR: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Standard,
    Depthwise,
    Pointwise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    kind: KernelKind,
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
    stride: usize,
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad {
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

pub fn weight_len(
    kind: KernelKind,
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
) -> usize {
    let taps = kernel_size.pow(3);
    match kind {
        KernelKind::Standard => in_channels * out_channels * taps,
        KernelKind::Depthwise => in_channels * taps,
        KernelKind::Pointwise => in_channels * out_channels,
    }
}

impl ConvKernel {
    pub fn new(
        kind: KernelKind,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Shape("kernels need at least one channel".into()));
        }
        if kernel_size.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "kernel size must be odd, got {kernel_size}"
            )));
        }
        match kind {
            KernelKind::Depthwise if in_channels != out_channels => {
                return Err(Error::Shape(format!(
                    "depthwise kernel maps {in_channels} channels to {out_channels}"
                )))
            }
            KernelKind::Pointwise if kernel_size != 1 => {
                return Err(Error::Shape(format!(
                    "pointwise kernel has size {kernel_size}"
                )))
            }
            _ => {}
        }
        let expected = weight_len(kind, in_channels, out_channels, kernel_size);
        if weights.len() != expected {
            return Err(Error::Shape(format!(
                "{kind:?} kernel needs {expected} weights, got {}",
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::Shape(format!(
                    "bias has {} entries for {out_channels} output channels",
                    b.len()
                )));
            }
        }
        if weights
            .iter()
            .chain(bias.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Validation("kernel parameters must be finite".into()));
        }
        Ok(Self {
            kind,
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            weights,
            bias,
        })
    }

    pub fn standard(
        m: usize,
        n: usize,
        k: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        Self::new(KernelKind::Standard, m, n, k, weights, bias)
    }

    pub fn depthwise(
        m: usize,
        k: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        Self::new(KernelKind::Depthwise, m, m, k, weights, bias)
    }

    pub fn pointwise(
        m: usize,
        n: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        Self::new(KernelKind::Pointwise, m, n, 1, weights, bias)
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        kind: KernelKind,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let taps = kernel_size.pow(3);
        let (fan_in, fan_out) = match kind {
            KernelKind::Standard => (in_channels * taps, out_channels * taps),
            KernelKind::Depthwise => (taps, taps),
            KernelKind::Pointwise => (in_channels, out_channels),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..weight_len(kind, in_channels, out_channels, kernel_size))
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias = with_bias.then(|| vec![0.0; out_channels]);
        Self::new(kind, in_channels, out_channels, kernel_size, weights, bias)
    }

    /// Kernel whose center tap is the identity map and every other tap is zero.
    pub fn identity(kind: KernelKind, channels: usize, kernel_size: usize) -> Result<Self> {
        let taps = kernel_size.pow(3);
        let center = (taps - 1) / 2;
        let mut w = vec![0.0; weight_len(kind, channels, channels, kernel_size)];
        for c in 0..channels {
            match kind {
                KernelKind::Standard => w[(center * channels + c) * channels + c] = 1.0,
                KernelKind::Depthwise => w[center * channels + c] = 1.0,
                KernelKind::Pointwise => w[c * channels + c] = 1.0,
            }
        }
        Self::new(kind, channels, channels, kernel_size, w, None)
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn taps(&self) -> usize {
        self.kernel_size.pow(3)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn spec(&self) -> LayerSpec {
        match self.kind {
            KernelKind::Standard => LayerSpec::Standard {
                in_channels: self.in_channels,
                out_channels: self.out_channels,
                kernel_size: self.kernel_size,
                bias: self.bias.is_some(),
            },
            KernelKind::Depthwise => LayerSpec::Depthwise {
                channels: self.in_channels,
                kernel_size: self.kernel_size,
                bias: self.bias.is_some(),
            },
            KernelKind::Pointwise => LayerSpec::Pointwise {
                in_channels: self.in_channels,
                out_channels: self.out_channels,
                bias: self.bias.is_some(),
            },
        }
    }

    /// Index of weight `(tap, out, in)` for standard kernels.
    #[inline]
    fn std_index(&self, tap: usize, n: usize, m: usize) -> usize {
        (tap * self.out_channels + n) * self.in_channels + m
    }
}

/// Tap index of spatial offset `(d_rho, d_phi, d_z)`, each in `-r..=r`.
pub fn tap_index(kernel_size: usize, offset: (i64, i64, i64)) -> usize {
    let r = (kernel_size / 2) as i64;
    let k = kernel_size as i64;
    (((offset.0 + r) * k + (offset.1 + r)) * k + (offset.2 + r)) as usize
}

/// Neighbor coordinate at `offset`, wrapping azimuth and clipping radius and height.
pub fn neighbor_coord(
    dims: [usize; 3],
    c: VoxelCoord,
    offset: (i64, i64, i64),
) -> Option<VoxelCoord> {
    let rho = c.rho as i64 + offset.0;
    let z = c.z as i64 + offset.2;
    if rho < 0 || rho >= dims[0] as i64 || z < 0 || z >= dims[2] as i64 {
        return None;
    }
    let phi = (c.phi as i64 + offset.1).rem_euclid(dims[1] as i64);
    Some(VoxelCoord::new(rho as u32, phi as u32, z as u32))
}

/// Per-site neighbor table for one active set and kernel size.
#[derive(Debug, Clone)]
pub struct Rulebook {
    kernel_size: usize,
    n_sites: usize,
    neighbors: Vec<u32>,
    pairs: usize,
}

impl Rulebook {
    pub fn build(t: &SparseVoxelTensor, kernel_size: usize) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "kernel size must be odd, got {kernel_size}"
            )));
        }
        let taps = kernel_size.pow(3);
        let r = (kernel_size / 2) as i64;
        let dims = t.grid().dims();
        let mut offsets = Vec::with_capacity(taps);
        for a in -r..=r {
            for b in -r..=r {
                for c in -r..=r {
                    offsets.push((a, b, c));
                }
            }
        }
        let neighbors: Vec<u32> = t
            .coords()
            .par_iter()
            .flat_map_iter(|&c| {
                offsets.iter().map(move |&o| {
                    neighbor_coord(dims, c, o)
                        .and_then(|nc| t.index_of(nc))
                        .map_or(NO_NEIGHBOR, |i| i as u32)
                })
            })
            .collect();
        let pairs = neighbors.iter().filter(|&&n| n != NO_NEIGHBOR).count();
        Ok(Self {
            kernel_size,
            n_sites: t.len(),
            neighbors,
            pairs,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn taps(&self) -> usize {
        self.kernel_size.pow(3)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// Active (output site, tap) pairs with an active input neighbor.
    pub fn pair_count(&self) -> usize {
        self.pairs
    }

    pub fn neighbor(&self, site: usize, tap: usize) -> Option<usize> {
        let n = self.neighbors[site * self.taps() + tap];
        (n != NO_NEIGHBOR).then_some(n as usize)
    }

    fn row(&self, site: usize) -> &[u32] {
        let taps = self.taps();
        &self.neighbors[site * taps..(site + 1) * taps]
    }
}

fn check_rulebook(k: &ConvKernel, rb: Option<&Rulebook>, n_sites: usize) -> Result<()> {
    if k.kind == KernelKind::Pointwise {
        return Ok(());
    }
    let rb = rb.ok_or_else(|| Error::Shape("spatial kernel needs a rulebook".into()))?;
    if rb.kernel_size != k.kernel_size || rb.n_sites != n_sites {
        return Err(Error::Shape(format!(
            "rulebook built for {} sites / size {} used with {n_sites} sites / size {}",
            rb.n_sites, rb.kernel_size, k.kernel_size
        )));
    }
    Ok(())
}

/// Applies `k` to row-major site features `input` (`n_sites x in_channels`).
pub fn conv_forward(k: &ConvKernel, rb: Option<&Rulebook>, input: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = (k.in_channels, k.out_channels);
    if !input.len().is_multiple_of(m) {
        return Err(Error::Shape(format!(
            "{} input values are not a multiple of {m} channels",
            input.len()
        )));
    }
    let n_sites = input.len() / m;
    check_rulebook(k, rb, n_sites)?;
    let mut out = vec![0.0; n_sites * n];
    out.par_chunks_mut(n).enumerate().for_each(|(site, o)| {
        if let Some(b) = &k.bias {
            o.copy_from_slice(b);
        }
        match k.kind {
            KernelKind::Pointwise => {
                let x = &input[site * m..(site + 1) * m];
                for (j, oj) in o.iter_mut().enumerate() {
                    let w = &k.weights[j * m..(j + 1) * m];
                    *oj += dot(w, x);
                }
            }
            KernelKind::Depthwise => {
                let rb = rb.expect("checked");
                for (tap, &nb) in rb.row(site).iter().enumerate() {
                    if nb == NO_NEIGHBOR {
                        continue;
                    }
                    let x = &input[nb as usize * m..(nb as usize + 1) * m];
                    let w = &k.weights[tap * m..(tap + 1) * m];
                    for c in 0..m {
                        o[c] += w[c] * x[c];
                    }
                }
            }
            KernelKind::Standard => {
                let rb = rb.expect("checked");
                for (tap, &nb) in rb.row(site).iter().enumerate() {
                    if nb == NO_NEIGHBOR {
                        continue;
                    }
                    let x = &input[nb as usize * m..(nb as usize + 1) * m];
                    for (j, oj) in o.iter_mut().enumerate() {
                        let base = k.std_index(tap, j, 0);
                        *oj += dot(&k.weights[base..base + m], x);
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Reverse pass of [`conv_forward`]: gradients for the input features and the kernel.
pub fn conv_backward(
    k: &ConvKernel,
    rb: Option<&Rulebook>,
    input: &[f64],
    grad_out: &[f64],
) -> Result<(Vec<f64>, KernelGrad)> {
    let (m, n) = (k.in_channels, k.out_channels);
    let n_sites = input.len() / m;
    if input.len() != n_sites * m || grad_out.len() != n_sites * n {
        return Err(Error::Shape(format!(
            "backward got {} inputs and {} output grads for {m}->{n} channels",
            input.len(),
            grad_out.len()
        )));
    }
    check_rulebook(k, rb, n_sites)?;
    let taps = k.taps();

    // input gradient: gather over mirrored taps so every site is written by one task
    let mut grad_in = vec![0.0; n_sites * m];
    grad_in
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(site, gi)| match k.kind {
            KernelKind::Pointwise => {
                let go = &grad_out[site * n..(site + 1) * n];
                for (j, &g) in go.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let w = &k.weights[j * m..(j + 1) * m];
                    axpy(g, w, gi);
                }
            }
            KernelKind::Depthwise => {
                let rb = rb.expect("checked");
                for (tap, &src) in rb.row(site).iter().enumerate() {
                    if src == NO_NEIGHBOR {
                        continue;
                    }
                    // site = neighbor(src, taps - 1 - tap)
                    let t = taps - 1 - tap;
                    let go = &grad_out[src as usize * n..(src as usize + 1) * n];
                    let w = &k.weights[t * m..(t + 1) * m];
                    for c in 0..m {
                        gi[c] += w[c] * go[c];
                    }
                }
            }
            KernelKind::Standard => {
                let rb = rb.expect("checked");
                for (tap, &src) in rb.row(site).iter().enumerate() {
                    if src == NO_NEIGHBOR {
                        continue;
                    }
                    let t = taps - 1 - tap;
                    let go = &grad_out[src as usize * n..(src as usize + 1) * n];
                    for (j, &g) in go.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let base = k.std_index(t, j, 0);
                        axpy(g, &k.weights[base..base + m], gi);
                    }
                }
            }
        });

    // weight gradient: fixed-size chunks reduced in order
    let wlen = k.weights.len();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n_sites)
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|sites| {
            let mut gw = vec![0.0; wlen];
            let mut gb = vec![0.0; n];
            for &site in sites {
                let go = &grad_out[site * n..(site + 1) * n];
                for (b, &g) in gb.iter_mut().zip(go) {
                    *b += g;
                }
                match k.kind {
                    KernelKind::Pointwise => {
                        let x = &input[site * m..(site + 1) * m];
                        for (j, &g) in go.iter().enumerate() {
                            axpy(g, x, &mut gw[j * m..(j + 1) * m]);
                        }
                    }
                    KernelKind::Depthwise => {
                        let rb = rb.expect("checked");
                        for (tap, &nb) in rb.row(site).iter().enumerate() {
                            if nb == NO_NEIGHBOR {
                                continue;
                            }
                            let x = &input[nb as usize * m..(nb as usize + 1) * m];
                            let w = &mut gw[tap * m..(tap + 1) * m];
                            for c in 0..m {
                                w[c] += go[c] * x[c];
                            }
                        }
                    }
                    KernelKind::Standard => {
                        let rb = rb.expect("checked");
                        for (tap, &nb) in rb.row(site).iter().enumerate() {
                            if nb == NO_NEIGHBOR {
                                continue;
                            }
                            let x = &input[nb as usize * m..(nb as usize + 1) * m];
                            for (j, &g) in go.iter().enumerate() {
                                let base = k.std_index(tap, j, 0);
                                axpy(g, x, &mut gw[base..base + m]);
                            }
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();
    let mut weights = vec![0.0; wlen];
    let mut bias = vec![0.0; n];
    for (gw, gb) in partials {
        axpy(1.0, &gw, &mut weights);
        axpy(1.0, &gb, &mut bias);
    }
    Ok((
        grad_in,
        KernelGrad {
            weights,
            bias: k.bias.is_some().then_some(bias),
        },
    ))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn check_channels(t: &SparseVoxelTensor, k: &ConvKernel) -> Result<()> {
    if t.channels() != k.in_channels {
        return Err(Error::Shape(format!(
            "tensor has {} channels, kernel expects {}",
            t.channels(),
            k.in_channels
        )));
    }
    Ok(())
}

/// Submanifold convolution with a standard or depthwise kernel; active set is preserved.
pub fn submanifold_conv(t: &SparseVoxelTensor, k: &ConvKernel) -> Result<SparseVoxelTensor> {
    if k.kind == KernelKind::Pointwise {
        return Err(Error::Shape(
            "submanifold_conv takes standard or depthwise kernels; use sparse_pointwise_conv"
                .into(),
        ));
    }
    check_channels(t, k)?;
    let rb = Rulebook::build(t, k.kernel_size)?;
    let out = conv_forward(k, Some(&rb), t.features())?;
    t.with_features(k.out_channels, out)
}

pub fn sparse_pointwise_conv(t: &SparseVoxelTensor, k: &ConvKernel) -> Result<SparseVoxelTensor> {
    if k.kind != KernelKind::Pointwise {
        return Err(Error::Shape(
            "sparse_pointwise_conv takes a pointwise kernel".into(),
        ));
    }
    check_channels(t, k)?;
    let out = conv_forward(k, None, t.features())?;
    t.with_features(k.out_channels, out)
}

/// Sparse depthwise separable convolution: depthwise spatial filtering, then pointwise mixing.
pub fn sdsc(
    t: &SparseVoxelTensor,
    depthwise: &ConvKernel,
    pointwise: &ConvKernel,
) -> Result<SparseVoxelTensor> {
    if depthwise.kind != KernelKind::Depthwise || pointwise.kind != KernelKind::Pointwise {
        return Err(Error::Shape(
            "sdsc takes a depthwise and a pointwise kernel".into(),
        ));
    }
    if depthwise.out_channels != pointwise.in_channels {
        return Err(Error::Shape(format!(
            "depthwise emits {} channels, pointwise expects {}",
            depthwise.out_channels, pointwise.in_channels
        )));
    }
    let spatial = submanifold_conv(t, depthwise)?;
    sparse_pointwise_conv(&spatial, pointwise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::CylGridSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(n: u32) -> CylGridSpec {
        CylGridSpec::new(n, n, n, n as f64, (0.0, n as f64)).unwrap()
    }

    fn random_tensor(
        rng: &mut ChaCha8Rng,
        n: u32,
        channels: usize,
        density: f64,
    ) -> SparseVoxelTensor {
        let mut entries = Vec::new();
        for r in 0..n {
            for p in 0..n {
                for z in 0..n {
                    if rng.gen_bool(density) {
                        let f = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        entries.push((VoxelCoord::new(r, p, z), f));
                    }
                }
            }
        }
        SparseVoxelTensor::from_entries(grid(n), channels, entries).unwrap()
    }

    #[test]
    fn identity_kernels_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, 5, 3, 0.3);
        for kind in [KernelKind::Standard, KernelKind::Depthwise] {
            let out = submanifold_conv(&t, &ConvKernel::identity(kind, 3, 3).unwrap()).unwrap();
            assert_eq!(out.features(), t.features());
            assert_eq!(out.coords(), t.coords());
        }
        let pw = ConvKernel::identity(KernelKind::Pointwise, 3, 1).unwrap();
        assert_eq!(
            sparse_pointwise_conv(&t, &pw).unwrap().features(),
            t.features()
        );
        let dw = ConvKernel::identity(KernelKind::Depthwise, 3, 3).unwrap();
        assert_eq!(sdsc(&t, &dw, &pw).unwrap(), t);
    }

    #[test]
    fn zero_weights_give_zero_outputs_on_same_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tensor(&mut rng, 4, 2, 0.4);
        let k = ConvKernel::standard(2, 5, 3, vec![0.0; 2 * 5 * 27], None).unwrap();
        let out = submanifold_conv(&t, &k).unwrap();
        assert_eq!(out.coords(), t.coords());
        assert_eq!(out.channels(), 5);
        assert!(out.features().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_hand_product() {
        let g = grid(2);
        let t =
            SparseVoxelTensor::from_entries(g, 2, vec![(VoxelCoord::new(0, 0, 0), vec![1.0, 2.0])])
                .unwrap();
        // rows are output channels: (1, 0) and (1, 1)
        let k = ConvKernel::pointwise(2, 2, vec![1.0, 0.0, 1.0, 1.0], None).unwrap();
        assert_eq!(
            sparse_pointwise_conv(&t, &k).unwrap().feature(0),
            &[1.0, 3.0]
        );
        let empty = SparseVoxelTensor::empty(g, 2);
        assert!(sparse_pointwise_conv(&empty, &k).unwrap().is_empty());
    }

    #[test]
    fn sdsc_is_the_two_step_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&mut rng, 6, 4, 0.25);
        let dw = ConvKernel::glorot(KernelKind::Depthwise, 4, 4, 3, true, &mut rng).unwrap();
        let pw = ConvKernel::glorot(KernelKind::Pointwise, 4, 7, 1, true, &mut rng).unwrap();
        let fused = sdsc(&t, &dw, &pw).unwrap();
        let two_step = sparse_pointwise_conv(&submanifold_conv(&t, &dw).unwrap(), &pw).unwrap();
        assert_eq!(fused, two_step);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tensor(&mut rng, 3, 2, 0.5);
        let k = ConvKernel::identity(KernelKind::Standard, 3, 3).unwrap();
        assert!(matches!(submanifold_conv(&t, &k), Err(Error::Shape(_))));
        let dw = ConvKernel::identity(KernelKind::Depthwise, 2, 3).unwrap();
        let pw = ConvKernel::identity(KernelKind::Pointwise, 3, 1).unwrap();
        assert!(matches!(sdsc(&t, &dw, &pw), Err(Error::Shape(_))));
    }

    #[test]
    fn kernel_validation() {
        assert!(ConvKernel::new(KernelKind::Depthwise, 2, 3, 3, vec![0.0; 54], None).is_err());
        assert!(ConvKernel::new(KernelKind::Pointwise, 2, 3, 3, vec![0.0; 6], None).is_err());
        assert!(ConvKernel::new(KernelKind::Standard, 2, 3, 2, vec![0.0; 48], None).is_err());
        assert!(ConvKernel::new(KernelKind::Standard, 2, 3, 3, vec![0.0; 10], None).is_err());
        assert!(ConvKernel::pointwise(2, 3, vec![0.0; 6], Some(vec![0.0; 2])).is_err());
        assert!(ConvKernel::pointwise(1, 1, vec![f64::NAN], None).is_err());
    }

    #[test]
    fn azimuth_wraps_in_rulebook() {
        let g = CylGridSpec::new(3, 4, 3, 3.0, (0.0, 3.0)).unwrap();
        let a = VoxelCoord::new(1, 0, 1);
        let b = VoxelCoord::new(1, 3, 1);
        let t =
            SparseVoxelTensor::from_entries(g, 1, vec![(a, vec![1.0]), (b, vec![2.0])]).unwrap();
        let rb = Rulebook::build(&t, 3).unwrap();
        assert_eq!(rb.neighbor(0, tap_index(3, (0, -1, 0))), Some(1));
        assert_eq!(rb.neighbor(1, tap_index(3, (0, 1, 0))), Some(0));
        // radius does not wrap
        assert_eq!(
            neighbor_coord(g.dims(), VoxelCoord::new(0, 0, 0), (-1, 0, 0)),
            None
        );
        assert_eq!(rb.pair_count(), 4);
    }
}
