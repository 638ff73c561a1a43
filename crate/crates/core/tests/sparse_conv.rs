use lim3d_core::sparse_conv::{
    conv_forward, sdsc, sparse_pointwise_conv, submanifold_conv, ConvKernel, KernelKind, LayerSpec,
    Rulebook,
};
use lim3d_core::voxel::{densify, CylGridSpec, SparseVoxelTensor, VoxelCoord};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, max_dim: u32, max_channels: usize) -> SparseVoxelTensor {
    let dims = [
        rng.gen_range(1..=max_dim),
        rng.gen_range(1..=max_dim),
        rng.gen_range(1..=max_dim),
    ];
    let grid = CylGridSpec::new(
        dims[0],
        dims[1],
        dims[2],
        dims[0] as f64,
        (0.0, dims[2] as f64),
    )
    .unwrap();
    let channels = rng.gen_range(1..=max_channels);
    let density: f64 = rng.gen_range(0.05..0.6);
    let mut entries = Vec::new();
    for r in 0..dims[0] {
        for p in 0..dims[1] {
            for z in 0..dims[2] {
                if rng.gen_bool(density) {
                    let f = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    entries.push((VoxelCoord::new(r, p, z), f));
                }
            }
        }
    }
    if entries.is_empty() {
        entries.push((VoxelCoord::new(0, 0, 0), vec![0.5; channels]));
    }
    SparseVoxelTensor::from_entries(grid, channels, entries).unwrap()
}

fn random_kernel(
    rng: &mut ChaCha8Rng,
    kind: KernelKind,
    m: usize,
    n: usize,
    k: usize,
) -> ConvKernel {
    let mut k = ConvKernel::glorot(kind, m, n, k, rng.gen_bool(0.5), rng).unwrap();
    if let Some(b) = k.bias() {
        let b: Vec<f64> = b.iter().map(|_| rng.gen_range(-0.5..0.5)).collect();
        k = ConvKernel::new(
            k.kind(),
            m,
            n,
            k.kernel_size(),
            k.weights().to_vec(),
            Some(b),
        )
        .unwrap();
    }
    k
}

/// Dense convolution over the whole grid (inactive cells hold zeros), read back at active sites only.
fn masked_dense(t: &SparseVoxelTensor, k: &ConvKernel) -> Vec<f64> {
    let dense = densify(t).unwrap();
    let dims = t.grid().dims();
    let (m, n, ks) = (k.in_channels(), k.out_channels(), k.kernel_size());
    let r = (ks / 2) as i64;
    let w = k.weights();
    let mut out = Vec::with_capacity(t.len() * n);
    for &c in t.coords() {
        let mut o: Vec<f64> = k.bias().map_or(vec![0.0; n], |b| b.to_vec());
        for dr in -r..=r {
            for dp in -r..=r {
                for dz in -r..=r {
                    let rho = c.rho as i64 + dr;
                    let z = c.z as i64 + dz;
                    if rho < 0 || rho >= dims[0] as i64 || z < 0 || z >= dims[2] as i64 {
                        continue;
                    }
                    let phi = (c.phi as i64 + dp).rem_euclid(dims[1] as i64);
                    let x = dense.at(VoxelCoord::new(rho as u32, phi as u32, z as u32));
                    let tap = (((dr + r) * ks as i64 + (dp + r)) * ks as i64 + (dz + r)) as usize;
                    match k.kind() {
                        KernelKind::Standard => {
                            for j in 0..n {
                                for i in 0..m {
                                    o[j] += w[(tap * n + j) * m + i] * x[i];
                                }
                            }
                        }
                        KernelKind::Depthwise => {
                            for i in 0..m {
                                o[i] += w[tap * m + i] * x[i];
                            }
                        }
                        KernelKind::Pointwise => {
                            for j in 0..n {
                                for i in 0..m {
                                    o[j] += w[j * m + i] * x[i];
                                }
                            }
                        }
                    }
                }
            }
        }
        out.extend(o);
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn dense_oracle_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..60 {
        let t = random_tensor(&mut rng, 6, 5);
        let m = t.channels();
        let n = rng.gen_range(1..=5);
        let ks = if case % 3 == 0 { 1 } else { 3 };

        let std = random_kernel(&mut rng, KernelKind::Standard, m, n, ks);
        let got = submanifold_conv(&t, &std).unwrap();
        assert!(max_abs_diff(got.features(), &masked_dense(&t, &std)) < 1e-10);

        let dw = random_kernel(&mut rng, KernelKind::Depthwise, m, m, ks);
        let got = submanifold_conv(&t, &dw).unwrap();
        assert!(max_abs_diff(got.features(), &masked_dense(&t, &dw)) < 1e-10);

        let pw = random_kernel(&mut rng, KernelKind::Pointwise, m, n, 1);
        let got = sparse_pointwise_conv(&t, &pw).unwrap();
        assert!(max_abs_diff(got.features(), &masked_dense(&t, &pw)) < 1e-10);

        let got = sdsc(&t, &dw, &pw).unwrap();
        let mid = t.with_features(m, masked_dense(&t, &dw)).unwrap();
        assert!(max_abs_diff(got.features(), &masked_dense(&mid, &pw)) < 1e-10);
    }
}

#[test]
fn kernel_kinds_are_checked() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = random_tensor(&mut rng, 4, 3);
    let m = t.channels();
    let pw = ConvKernel::identity(KernelKind::Pointwise, m, 1).unwrap();
    let dw = ConvKernel::identity(KernelKind::Depthwise, m, 3).unwrap();
    assert!(submanifold_conv(&t, &pw).is_err());
    assert!(sparse_pointwise_conv(&t, &dw).is_err());
    assert!(sdsc(&t, &pw, &dw).is_err());
    let wrong = ConvKernel::identity(KernelKind::Standard, m + 1, 3).unwrap();
    assert!(submanifold_conv(&t, &wrong).is_err());
    assert!(ConvKernel::depthwise(2, 2, vec![0.0; 16], None).is_err());
}

#[test]
fn identity_kernels_copy_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let t = random_tensor(&mut rng, 5, 4);
        for kind in [KernelKind::Standard, KernelKind::Depthwise] {
            let k = ConvKernel::identity(kind, t.channels(), 3).unwrap();
            assert_eq!(submanifold_conv(&t, &k).unwrap().features(), t.features());
        }
    }
}

#[test]
fn azimuth_wraps_but_radius_does_not() {
    let grid = CylGridSpec::new(3, 4, 1, 3.0, (0.0, 1.0)).unwrap();
    let t = SparseVoxelTensor::from_entries(
        grid,
        1,
        vec![
            (VoxelCoord::new(0, 0, 0), vec![1.0]),
            (VoxelCoord::new(0, 3, 0), vec![10.0]),
            (VoxelCoord::new(2, 0, 0), vec![100.0]),
        ],
    )
    .unwrap();
    let k = ConvKernel::depthwise(1, 3, vec![1.0; 27], None).unwrap();
    let out = submanifold_conv(&t, &k).unwrap();
    // (0,0) sees itself and its wrapped azimuth neighbor; (2,0) is two radial cells away
    assert_eq!(out.get(VoxelCoord::new(0, 0, 0)).unwrap(), &[11.0]);
    assert_eq!(out.get(VoxelCoord::new(2, 0, 0)).unwrap(), &[100.0]);
}

#[test]
fn rulebook_pairs_count_active_neighbors() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let t = random_tensor(&mut rng, 6, 1);
        let rb = Rulebook::build(&t, 3).unwrap();
        let mut pairs = 0;
        for site in 0..rb.n_sites() {
            for tap in 0..rb.taps() {
                if let Some(nb) = rb.neighbor(site, tap) {
                    assert!(nb < t.len());
                    pairs += 1;
                }
            }
        }
        assert_eq!(pairs, rb.pair_count());
        // the center tap always hits the site itself
        for site in 0..rb.n_sites() {
            assert_eq!(rb.neighbor(site, 13), Some(site));
        }
    }
}

fn seeded() -> impl Strategy<Value = u64> {
    any::<u64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn active_set_is_preserved(seed in seeded(), ks in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_tensor(&mut rng, 8, 8);
        let m = t.channels();
        let n = rng.gen_range(1..=8);
        let std = random_kernel(&mut rng, KernelKind::Standard, m, n, ks);
        let dw = random_kernel(&mut rng, KernelKind::Depthwise, m, m, ks);
        let pw = random_kernel(&mut rng, KernelKind::Pointwise, m, n, 1);
        prop_assert_eq!(submanifold_conv(&t, &std).unwrap().coords().to_vec(), t.coords().to_vec());
        prop_assert_eq!(submanifold_conv(&t, &dw).unwrap().coords().to_vec(), t.coords().to_vec());
        prop_assert_eq!(sdsc(&t, &dw, &pw).unwrap().coords().to_vec(), t.coords().to_vec());
    }

    #[test]
    fn bias_free_convolution_is_linear(seed in seeded(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_tensor(&mut rng, 6, 4);
        let m = t.channels();
        let rb = Rulebook::build(&t, 3).unwrap();
        let y: Vec<f64> = (0..t.features().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = t.features().iter().zip(&y).map(|(x, y)| a * x + b * y).collect();
        for kind in [KernelKind::Standard, KernelKind::Depthwise, KernelKind::Pointwise] {
            let (n, ks) = match kind {
                KernelKind::Standard => (3, 3),
                KernelKind::Depthwise => (m, 3),
                KernelKind::Pointwise => (2, 1),
            };
            let k = ConvKernel::glorot(kind, m, n, ks, false, &mut rng).unwrap();
            let rb = (ks > 1).then_some(&rb);
            let fx = conv_forward(&k, rb, t.features()).unwrap();
            let fy = conv_forward(&k, rb, &y).unwrap();
            let fm = conv_forward(&k, rb, &mix).unwrap();
            for i in 0..fm.len() {
                prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn separable_layers_have_fewer_weights(m in 1usize..256, n in 2usize..256, r in 1usize..4) {
        let k = 2 * r + 1;
        let sep = LayerSpec::Sdsc { in_channels: m, out_channels: n, kernel_size: k, depthwise_bias: false, pointwise_bias: false };
        let std = LayerSpec::Standard { in_channels: m, out_channels: n, kernel_size: k, bias: false };
        prop_assert_eq!(sep.trainable_params(), (m * k.pow(3) + m * n) as u64);
        prop_assert_eq!(std.trainable_params(), (m * n * k.pow(3)) as u64);
        prop_assert!(sep.trainable_params() < std.trainable_params());
        prop_assert!(std.separable_ratio().unwrap() > 1.0);
    }
}
