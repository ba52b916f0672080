//! The binding functions called directly from Rust; error paths build lazy
//! Python exceptions, so no interpreter is needed.

use roiterp_py::{bilinear_sample, lr_schedule, make_synthetic, metrics, roi_align};

#[test]
fn zero_flow_round_trips_flat_lists() {
    let img: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 / 24.0).collect();
    let out = bilinear_sample(img.clone(), vec![0.0; 2 * 3 * 4], vec![1, 2, 3, 4]).unwrap();
    assert_eq!(out, img);
    assert!(bilinear_sample(img, vec![0.0; 3], vec![1, 2, 3, 4]).is_err());
    assert!(bilinear_sample(vec![], vec![], vec![1, 2]).is_err());
}

#[test]
fn roi_align_full_box_is_identity() {
    let map: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let out = roi_align(
        map.clone(),
        vec![1, 1, 3, 4],
        vec![(0, 0.0, 0.0, 4.0, 3.0)],
        3,
        4,
        1,
    )
    .unwrap();
    assert_eq!(out, map);
    assert!(roi_align(
        map,
        vec![1, 1, 3, 4],
        vec![(1, 0.0, 0.0, 4.0, 3.0)],
        3,
        4,
        1
    )
    .is_err());
}

#[test]
fn metrics_and_schedule_values() {
    let a = vec![0.2; 3 * 12 * 12];
    let b = vec![0.3; 3 * 12 * 12];
    let (ie, psnr, _) = metrics(a.clone(), b, (3, 12, 12), None).unwrap();
    assert!((ie - 25.5).abs() < 1e-9);
    assert!((psnr - 20.0).abs() < 1e-9);
    assert!(metrics(a.clone(), a, (3, 12, 12), Some(vec![false; 144])).is_err());
    assert_eq!(lr_schedule(25, 1e-4, 0.1, 10, 1e-8), 1e-6);
}

#[test]
fn synthetic_dataset_lands_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let root = make_synthetic(dir.path().join("d"), 2, 32, 32, 1).unwrap();
    assert!(root.join("clip_0001").join("frame_2.png").is_file());
    assert!(make_synthetic(dir.path().join("e"), 1, 8, 8, 0).is_err());
}
