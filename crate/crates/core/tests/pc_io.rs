use lim3d_core::pc_io::{
    decode_kitti_bin, decode_labels, encode_kitti_bin, encode_labels, load_frame, load_labels,
    project_range_image, save_frame, save_labels, FrameFormat, Point, PointCloud, SequenceLayout,
};
use lim3d_core::Error;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point> {
    (-80.0f32..80.0, -80.0f32..80.0, -5.0f32..5.0, 0.0f32..=1.0)
        .prop_map(|(x, y, z, i)| Point::new(x, y, z, i))
}

#[test]
fn rejects_bad_lengths_and_values() {
    assert!(matches!(
        decode_kitti_bin(&[0u8; 17]),
        Err(Error::Format(_))
    ));
    assert!(matches!(decode_labels(&[0u8; 7]), Err(Error::Format(_))));
    let mut bytes =
        encode_kitti_bin(&PointCloud::new(vec![Point::new(1.0, 2.0, 3.0, 0.5); 3], None).unwrap());
    bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
    match decode_kitti_bin(&bytes) {
        Err(Error::NonFinite { indices }) => assert_eq!(indices, vec![1]),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert!(PointCloud::new(vec![Point::new(0.0, 0.0, 0.0, 0.0)], Some(vec![1, 2])).is_err());
}

#[test]
fn intensity_is_clamped() {
    let pc = PointCloud::new(
        vec![
            Point::new(1.0, 0.0, 0.0, 1.7),
            Point::new(1.0, 0.0, 0.0, -0.2),
        ],
        None,
    )
    .unwrap();
    assert_eq!(pc.points()[0].intensity, 1.0);
    assert_eq!(pc.points()[1].intensity, 0.0);
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let layout = SequenceLayout::new(dir.path(), "00");
    std::fs::create_dir_all(layout.velodyne_dir()).unwrap();
    std::fs::create_dir_all(layout.labels_dir()).unwrap();
    let pc = PointCloud::new(
        vec![
            Point::new(1.0, 2.0, 3.0, 0.25),
            Point::new(-4.0, 5.0, -1.0, 1.0),
        ],
        None,
    )
    .unwrap();
    save_frame(&layout.frame_path(7), &pc).unwrap();
    save_labels(&layout.label_path(7), &[3, 9]).unwrap();
    assert_eq!(
        load_frame(&layout.frame_path(7), FrameFormat::KittiBin)
            .unwrap()
            .points(),
        pc.points()
    );
    assert_eq!(load_labels(&layout.label_path(7)).unwrap(), vec![3, 9]);
    assert_eq!(layout.frame_files().unwrap(), vec![layout.frame_path(7)]);
    assert!(
        load_frame(&dir.path().join("missing.bin"), FrameFormat::KittiBin)
            .unwrap_err()
            .is_validation()
    );
}

#[test]
fn projection_keeps_nearest_return() {
    let pc = PointCloud::new(
        vec![
            Point::new(10.0, 0.0, 0.0, 0.1),
            Point::new(5.0, 0.0, 0.0, 0.1),
        ],
        None,
    )
    .unwrap();
    let img = project_range_image(&pc, 8, 4, (-10.0, 10.0)).unwrap();
    assert_eq!(img.returns(), 1);
    assert_eq!(img.values().iter().copied().fold(0.0f32, f32::max), 5.0);
    assert!(project_range_image(&pc, 0, 4, (-10.0, 10.0)).is_err());
    assert!(project_range_image(&pc, 8, 4, (10.0, -10.0)).is_err());
}

proptest! {
    #[test]
    fn binary_round_trip(points in prop::collection::vec(point(), 0..200)) {
        let pc = PointCloud::new(points, None).unwrap();
        let back = decode_kitti_bin(&encode_kitti_bin(&pc)).unwrap();
        prop_assert_eq!(back.points(), pc.points());
    }

    #[test]
    fn label_round_trip(labels in prop::collection::vec(any::<u32>(), 0..200)) {
        prop_assert_eq!(decode_labels(&encode_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn projection_never_invents_returns(points in prop::collection::vec(point(), 0..300), w in 1usize..64, h in 1usize..16) {
        let pc = PointCloud::new(points, None).unwrap();
        let img = project_range_image(&pc, w, h, (-25.0, 3.0)).unwrap();
        prop_assert!(img.returns() <= pc.len());
        prop_assert_eq!(img.values().len(), w * h);
        prop_assert!(img.values().iter().all(|&v| v >= 0.0));
    }
}
