use lim3d_core::pc_io::{Point, PointCloud};
use lim3d_core::voxel::{
    densify, sparsify, voxelize, CylGridSpec, Reducer, SparseVoxelTensor, VoxelCoord,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid() -> CylGridSpec {
    CylGridSpec::new(8, 16, 4, 10.0, (-2.0, 2.0)).unwrap()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let points: Vec<Point> = (0..n)
        .map(|_| {
            Point::new(
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-2.5..2.5),
                rng.gen_range(0.0..1.0),
            )
        })
        .collect();
    let labels = (0..n).map(|_| rng.gen_range(0..4)).collect();
    PointCloud::new(points, Some(labels)).unwrap()
}

#[test]
fn binning_edges_go_up() {
    let g = CylGridSpec::new(4, 4, 2, 4.0, (0.0, 2.0)).unwrap();
    assert_eq!(g.locate(&Point::new(1.0, 0.0, 1.0, 0.0)).unwrap().rho, 1);
    assert_eq!(g.locate(&Point::new(1.0, 0.0, 1.0, 0.0)).unwrap().z, 1);
    assert!(g.locate(&Point::new(4.0, 0.0, 0.5, 0.0)).is_none());
    assert!(g.locate(&Point::new(1.0, 0.0, 2.0, 0.0)).is_none());
    // azimuth pi and -pi are the same direction
    let back = g.locate(&Point::new(-1.0, 0.0, 0.5, 0.0)).unwrap();
    assert_eq!(back.phi, 0);
}

#[test]
fn mean_and_majority() {
    let g = CylGridSpec::new(1, 1, 1, 10.0, (-1.0, 1.0)).unwrap();
    let pc = PointCloud::new(
        vec![
            Point::new(1.0, 0.0, 0.0, 0.2),
            Point::new(2.0, 0.0, 0.0, 0.4),
            Point::new(3.0, 0.0, 0.0, 0.9),
        ],
        Some(vec![5, 2, 5]),
    )
    .unwrap();
    let v = voxelize(&pc, &g, Reducer::Mean).unwrap();
    assert_eq!(v.tensor.len(), 1);
    let f = v.tensor.feature(0);
    assert!((f[0] - 2.0).abs() < 1e-12);
    assert!((f[3] - 0.5).abs() < 1e-7);
    assert_eq!(v.tensor.labels().unwrap(), &[5]);
    let v = voxelize(&pc, &g, Reducer::Max).unwrap();
    assert!((v.tensor.feature(0)[0] - 3.0).abs() < 1e-12);
}

#[test]
fn tensor_codec_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = voxelize(&random_cloud(&mut rng, 300), &grid(), Reducer::Mean).unwrap();
    let back = SparseVoxelTensor::decode(&v.tensor.encode()).unwrap();
    assert_eq!(back, v.tensor);
    let bytes = v.tensor.encode();
    assert!(SparseVoxelTensor::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(SparseVoxelTensor::decode(&bad).is_err());
}

#[test]
fn duplicates_and_outside_coords_are_rejected() {
    let g = CylGridSpec::new(2, 2, 2, 2.0, (0.0, 2.0)).unwrap();
    let c = VoxelCoord::new(0, 0, 0);
    assert!(SparseVoxelTensor::from_entries(g, 1, vec![(c, vec![1.0]), (c, vec![2.0])]).is_err());
    assert!(
        SparseVoxelTensor::from_entries(g, 1, vec![(VoxelCoord::new(2, 0, 0), vec![1.0])]).is_err()
    );
    assert!(SparseVoxelTensor::from_entries(g, 1, vec![(c, vec![f64::NAN])]).is_err());
    assert!(SparseVoxelTensor::from_entries(g, 2, vec![(c, vec![1.0])]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn voxelization_ignores_point_order(seed in any::<u64>(), n in 1usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pc = random_cloud(&mut rng, n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let labels = pc.labels().unwrap();
        let shuffled = PointCloud::new(
            idx.iter().map(|&i| pc.points()[i]).collect(),
            Some(idx.iter().map(|&i| labels[i]).collect()),
        )
        .unwrap();
        for reducer in [Reducer::Mean, Reducer::Max] {
            let a = voxelize(&pc, &grid(), reducer).unwrap();
            let b = voxelize(&shuffled, &grid(), reducer).unwrap();
            prop_assert_eq!(a.tensor.coords(), b.tensor.coords());
            prop_assert_eq!(a.tensor.labels(), b.tensor.labels());
            for (x, y) in a.tensor.features().iter().zip(b.tensor.features()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
            prop_assert_eq!(a.dropped, b.dropped);
        }
    }

    #[test]
    fn active_sites_bounded_by_points(seed in any::<u64>(), n in 0usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pc = random_cloud(&mut rng, n);
        let v = voxelize(&pc, &grid(), Reducer::Mean).unwrap();
        prop_assert!(v.tensor.len() <= n);
        prop_assert_eq!(v.point_sites.len(), n);
        prop_assert_eq!(v.point_sites.iter().filter(|s| s.is_none()).count(), v.dropped);
        prop_assert!(v.point_sites.iter().flatten().all(|&s| s < v.tensor.len()));
        prop_assert!(v.tensor.coords().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn densify_then_sparsify_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = grid();
        let mut entries = Vec::new();
        for r in 0..g.n_rho {
            for p in 0..g.n_phi {
                for z in 0..g.n_z {
                    if rng.gen_bool(0.2) {
                        entries.push((VoxelCoord::new(r, p, z), vec![rng.gen_range(0.1..1.0), rng.gen_range(-1.0..-0.1)]));
                    }
                }
            }
        }
        let t = SparseVoxelTensor::from_entries(g, 2, entries).unwrap();
        let back = sparsify(&densify(&t).unwrap(), &g).unwrap();
        prop_assert_eq!(back, t);
    }
}
