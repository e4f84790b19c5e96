mod common;

use advlab_core::data::{
    load_classifier, load_flow, save_classifier, save_flow, synth_manifold_dataset, two_moons, SyntheticManifoldSpec,
    TensorDataset,
};
use advlab_core::flow::{FlowConfig, FlowModel};
use advlab_core::Error;
use common::*;

#[test]
fn sign_rule_classes_are_balanced() {
    let s = synth_manifold_dataset(&SyntheticManifoldSpec::affine([1, 4, 4], 10_000, 1)).unwrap();
    let ones = s.dataset.labels().iter().filter(|&&y| y == 1).count() as f64 / 10_000.0;
    assert!((0.45..=0.55).contains(&ones), "{ones}");
}

#[test]
fn affine_latents_reconstruct_the_images() {
    for shape in [[4, 1, 1], [1, 2, 2]] {
        let s = synth_manifold_dataset(&SyntheticManifoldSpec::affine(shape, 100, 2)).unwrap();
        let z = s.dataset.latents().unwrap();
        let decoded = s.generator.decode_flat(z).unwrap();
        assert!(max_abs_diff(&decoded, s.dataset.images()) < 1e-6);
        let encoded = s.generator.encode_flat(s.dataset.images()).unwrap().into_dyn();
        assert!(max_abs_diff(&encoded, &z.clone().into_dyn()) < 1e-6);
    }
}

#[test]
fn same_seed_gives_identical_bits_and_other_seed_differs() {
    let spec = SyntheticManifoldSpec::affine([1, 4, 4], 200, 3);
    let a = synth_manifold_dataset(&spec).unwrap().dataset;
    let b = synth_manifold_dataset(&spec).unwrap().dataset;
    assert_eq!(a, b);
    let c = synth_manifold_dataset(&SyntheticManifoldSpec::affine([1, 4, 4], 200, 4)).unwrap().dataset;
    assert_ne!(a.images(), c.images());
    assert_eq!(two_moons(100, 0.1, 5).unwrap(), two_moons(100, 0.1, 5).unwrap());
}

#[test]
fn datasets_round_trip_through_disk() {
    let (data, _) = small_manifold(50, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.data");
    data.save(&path).unwrap();
    let back = TensorDataset::<f64>::load(&path).unwrap();
    assert_eq!(back, data);
    let narrow = TensorDataset::<f32>::load(&path).unwrap();
    assert_eq!(narrow.labels(), data.labels());
}

#[test]
fn flow_checkpoint_is_rejected_as_a_classifier() {
    let flow = random_flow([1, 4, 4], 2, 1, 4, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ckpt");
    save_flow(&flow, 6, &path).unwrap();
    assert!(load_classifier::<f64>(&path).is_err());
    let back: FlowModel<f64> = load_flow(&path).unwrap();
    let x = images(5, [1, 4, 4], 0.1, 0.9, 7);
    assert_eq!(back.encode_flat(&x).unwrap(), flow.encode_flat(&x).unwrap());

    let cpath = dir.path().join("c.ckpt");
    save_classifier(&mlp([1, 4, 4], &[4], 2, 0), 0, &cpath).unwrap();
    assert!(load_flow::<f64>(&cpath).is_err());
}

#[test]
fn identity_flow_checkpoint_has_zero_log_det() {
    let flow = FlowModel::<f64>::identity(FlowConfig::new([1, 2, 2]).with_levels(1).with_steps(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("id.ckpt");
    save_flow(&flow, 0, &path).unwrap();
    let back: FlowModel<f64> = load_flow(&path).unwrap();
    let x = images(8, [1, 2, 2], 0.1, 0.9, 8);
    let density = back.log_prob(&x).unwrap();
    assert!(density.log_det_jacobian.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn truncated_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.data");
    std::fs::write(&path, b"not a container").unwrap();
    assert!(matches!(TensorDataset::<f64>::load(&path), Err(Error::Format { .. })));
    assert!(matches!(TensorDataset::<f64>::load(&dir.path().join("missing")), Err(Error::Io(_))));
}
