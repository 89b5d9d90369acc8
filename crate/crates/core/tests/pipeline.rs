mod common;

use std::collections::BTreeMap;

use m2dino::data::{load_manifest, load_tasks, Label, LabeledSample, TaskData};
use m2dino::metrics::MetricReport;
use m2dino::synth::{four_task_plan, synth_generate};
use m2dino::trainer::{
    build_plan, sample_batches, score_predictions, train_unit, Checkpoint, MultiTaskModel, OptimizerConfig, Paradigm,
    Prediction, RunConfig, Trainer,
};
use m2dino::Error;

fn write_synthetic(dir: &std::path::Path, n: usize, size: usize) -> std::path::PathBuf {
    synth_generate(&four_task_plan(n, 2, size), 11).unwrap().write(dir).unwrap()
}

fn tiny_config(manifest: &std::path::Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::new(manifest, Paradigm::Au);
    cfg.model = common::tiny_model();
    cfg.optimizer = OptimizerConfig {
        batch_size: 4,
        ..common::desk_optimizer(epochs)
    };
    cfg.seed = 3;
    cfg.deterministic = true;
    cfg
}

fn load(cfg: &RunConfig) -> BTreeMap<String, TaskData> {
    let m = load_manifest(&cfg.manifest).unwrap();
    load_tasks(&m, &m.task_ids(), &cfg.model.preprocess(), cfg.val_fraction, cfg.seed).unwrap()
}

fn oracle(x: &LabeledSample) -> Prediction {
    match &x.label {
        Label::Mask(m) => Prediction::Mask(m.clone()),
        Label::Class(c) => {
            let mut s = vec![0.0; 2];
            s[*c] = 1.0;
            Prediction::Scores(s)
        }
        Label::Value { target, .. } => Prediction::Value(*target),
        Label::Box(b) => Prediction::Box(*b),
    }
}

#[test]
fn manifest_round_trip_and_oracle_scores() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_synthetic(dir.path(), 6, 32);
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.tasks.len(), 4);
    let again = m2dino::data::Manifest::from_json(&m.to_json().unwrap(), "again").unwrap();
    assert_eq!(again.tasks, m.tasks);

    let cfg = tiny_config(&path, 1);
    let data = load(&cfg);
    let mut report = MetricReport::default();
    for d in data.values() {
        let preds: Vec<Prediction> = d.train.iter().map(oracle).collect();
        score_predictions(&mut report, &d.spec, 32, &d.train, &preds, true).unwrap();
    }
    assert_eq!(report.get("ob_seg_0", "DSC").unwrap().value, 1.0);
    assert_eq!(report.get("ob_seg_0", "HD").unwrap().value, 0.0);
    assert_eq!(report.get("lung_cls_0", "ACC").unwrap().value, 1.0);
    assert_eq!(report.get("lung_cls_0", "AUC").unwrap().value, 1.0);
    assert_eq!(report.get("ob_reg_0", "MRE").unwrap().value, 0.0);
    assert_eq!(report.get("lung_det_0", "IoU").unwrap().value, 1.0);
    assert_eq!(MetricReport::from_json(&report.to_json().unwrap()).unwrap(), report);
}

#[test]
fn sampling_follows_dataset_sizes() {
    let sizes = BTreeMap::from([("big".to_string(), 900), ("small".to_string(), 100)]);
    let mut big = 0usize;
    let mut total = 0usize;
    for epoch in 0..12 {
        for b in sample_batches(&sizes, 1, epoch, 42).unwrap() {
            big += (b.task == "big") as usize;
            total += 1;
        }
    }
    assert!(total >= 10_000);
    let share = big as f64 / total as f64;
    assert!((share - 0.9).abs() < 0.02, "{share}");
}

#[test]
fn small_step_does_not_increase_loss() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_synthetic(dir.path(), 6, 32);
    let cfg = tiny_config(&path, 1);
    let data = load(&cfg);
    let specs: Vec<_> = data.values().map(|d| d.spec.clone()).collect();
    let model = MultiTaskModel::new(&cfg.model, &specs, true, 0).unwrap();
    let opt = OptimizerConfig {
        base_lr: 1e-6,
        backbone_lr: 1e-6,
        decoder_lr: 1e-6,
        moe_lr: 1e-6,
        head_lr: 1e-6,
        lr_grid: vec![1e-6],
        weight_decay: 0.0,
        ..cfg.optimizer.clone()
    };
    for (id, d) in &data {
        let mut trainer = Trainer::new(&model, &opt).unwrap();
        let batch: Vec<&LabeledSample> = d.train.iter().take(3).collect();
        let before = trainer.step(&model, id, &batch).unwrap();
        let after = model.loss(id, &batch).unwrap().to_scalar::<f32>().unwrap() as f64;
        assert!(after <= before + 1e-6, "{id}: {before} -> {after}");
    }
}

#[test]
fn checkpoint_reproduces_best_score() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_synthetic(dir.path(), 6, 32);
    let cfg = tiny_config(&path, 2);
    let data = load(&cfg);
    let specs: Vec<_> = data.values().map(|d| d.spec.clone()).collect();
    let unit = build_plan(Paradigm::Au, &specs).unwrap().units.remove(0);
    let outcome = train_unit(&unit, &cfg, &cfg.optimizer, &data).unwrap();
    assert_eq!(outcome.log.len(), 3);
    let ckpt_dir = dir.path().join("ckpt");
    let meta = Checkpoint::save(&ckpt_dir, &outcome, &cfg).unwrap();
    assert_eq!(meta.best_score, outcome.best_score);
    let ckpt = Checkpoint::load(&ckpt_dir).unwrap();
    let (_, score) = ckpt.validate(&ckpt.data().unwrap()).unwrap();
    assert_eq!(score, outcome.best_score);
    assert!(ckpt_dir.join("log.csv").is_file());
}

#[test]
fn non_finite_loss_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_synthetic(dir.path(), 6, 32);
    let cfg = tiny_config(&path, 1);
    let mut data = load(&cfg);
    for d in data.values_mut() {
        for x in &mut d.train {
            x.image[0] = f32::NAN;
        }
    }
    let specs: Vec<_> = data.values().map(|d| d.spec.clone()).collect();
    let unit = build_plan(Paradigm::Au, &specs).unwrap().units.remove(0);
    match train_unit(&unit, &cfg, &cfg.optimizer, &data) {
        Err(Error::NonFiniteLoss { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 0)),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training on NaN inputs succeeded"),
    }
}
