use dpn_core::data::{load_part, load_split, ChaseSplit, DatasetKind, DatasetSpec, Part, HRF_SIZE};
use dpn_core::metrics::{evaluate, EvalMode};
use dpn_core::model::{DpnConfig, DpnModel};
use dpn_core::optim::Adam;
use dpn_core::predict::predict_probability;
use dpn_core::synth::write_dataset;
use dpn_core::train::{train, TrainConfig, TrainSet};

#[test]
fn split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let drive = dir.path().join("drive");
    write_dataset(&drive, DatasetKind::Drive, Some((24, 20)), 1).unwrap();
    let (tr, te) = load_split(&DatasetSpec::new(DatasetKind::Drive, &drive)).unwrap();
    assert_eq!((tr.len(), te.len()), (20, 20));
    assert_eq!(tr[0].id, "21_training");
    assert_eq!(te[19].id, "20_test");

    let chase = dir.path().join("chase");
    write_dataset(&chase, DatasetKind::Chase, Some((40, 42)), 1).unwrap();
    let mut spec = DatasetSpec::new(DatasetKind::Chase, &chase);
    let (tr, te) = load_split(&spec).unwrap();
    assert_eq!((tr.len(), te.len()), (20, 8));
    assert_eq!(te[0].id, "Image_11L");
    // generated FOV covers the bright disc and not the corners
    assert!(!tr[0].fov.get(0, 0) && tr[0].fov.get(20, 21));
    spec.chase_split = ChaseSplit::S14_14;
    let (tr, te) = load_split(&spec).unwrap();
    assert_eq!((tr.len(), te.len()), (14, 14));

    let hrf = dir.path().join("hrf");
    write_dataset(&hrf, DatasetKind::Hrf, Some((30, 45)), 1).unwrap();
    let tr = load_part(&DatasetSpec::new(DatasetKind::Hrf, &hrf), Part::Train).unwrap();
    assert_eq!(tr.len(), 15);
    assert_eq!(tr.iter().filter(|s| s.id.ends_with("_g")).count(), 5);
    assert!(tr.iter().all(|s| (s.height(), s.width()) == HRF_SIZE));
}

#[test]
fn short_training_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("drive");
    write_dataset(&root, DatasetKind::Drive, Some((40, 36)), 2).unwrap();
    let (tr, te) = load_split(&DatasetSpec::new(DatasetKind::Drive, &root)).unwrap();
    let config = DpnConfig {
        num_blocks: 2,
        aux_positions: vec![1],
        ..DpnConfig::default()
    };
    let mut model = DpnModel::new(config, 0).unwrap();
    let mut adam = Adam::default();
    let cfg = TrainConfig {
        iterations: 30,
        crop_size: 32,
        ..TrainConfig::default()
    };
    let recs = train(&mut model, &mut adam, &TrainSet::new(tr, true), &cfg, |_| {}).unwrap();
    assert_eq!(recs.len(), 30);
    assert!(recs.iter().all(|r| r.report.total.is_finite() && r.sample < 220));
    let inputs: Vec<_> = te
        .iter()
        .map(|s| {
            let p = predict_probability(&model, &s.image).unwrap();
            assert_eq!(p.len(), 40 * 36);
            (s.id.clone(), p, s.label.clone(), s.fov.clone(), None)
        })
        .collect();
    let report = evaluate(&inputs, EvalMode::Pooled, None).unwrap();
    assert_eq!(report.images.len(), 20);
    let auc = report.pooled.auc.unwrap();
    assert!((0.0..=1.0).contains(&auc));
}
