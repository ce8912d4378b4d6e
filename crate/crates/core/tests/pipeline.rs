use gazesal::data::{generate_synthetic, grouped_split, load_dataset, save_dataset, DataConfig, SplitPlan};
use gazesal::model::{load_checkpoint, save_checkpoint, UNetConfig};
use gazesal::train::{fit, score_examples, Regime, TrainConfig};
use gazesal::{BackwardRule, Execution, UNetModel};

#[test]
fn corpus_survives_a_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let original = generate_synthetic(4, 32, 3).unwrap();
    let paths = save_dataset(&original, dir.path()).unwrap();
    let cfg = DataConfig { image_size: 32, ..Default::default() };
    let loaded = load_dataset(&paths, &cfg, Execution::Parallel).unwrap();
    assert_eq!(loaded.len(), original.len());
    for (a, b) in original.iter().zip(&loaded) {
        assert_eq!((&a.image_id, &a.patient_id, a.label), (&b.image_id, &b.patient_id, b.label));
        // 16-bit PNG quantization
        assert!(a.image.max_abs_diff(&b.image).unwrap() <= 1.0 / 65535.0);
        assert_eq!(a.fixations, b.fixations);
        assert_eq!(a.gaze_static, b.gaze_static);
        assert_eq!(a.gaze_temporals, b.gaze_temporals);
    }
}

#[test]
fn split_file_and_checkpoint_reproduce_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(10, 32, 1).unwrap();
    let plan = grouped_split(&data, [0.5, 0.25, 0.25], 4).unwrap();
    plan.save(dir.path().join("split.json")).unwrap();
    let reread = SplitPlan::load(dir.path().join("split.json")).unwrap();
    assert_eq!(plan, reread);

    let [train, val, test] = reread.partition(&data).unwrap();
    let model = UNetModel::build(UNetConfig { input_size: 32, encoder_channels: vec![2, 4], seed: 2, ..Default::default() }).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..Default::default() };
    let out = fit(model, &train, &val, &Regime::MaskVsSal { rule: BackwardRule::Guided }, &cfg).unwrap();
    let path = dir.path().join("model.ggt");
    save_checkpoint(&out.model, &path).unwrap();
    let back = load_checkpoint(&path, 32).unwrap();
    let a = score_examples(&out.model, &test, Execution::Serial).unwrap();
    let b = score_examples(&back, &test, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}
