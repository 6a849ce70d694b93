mod common;

use auranet::model::{Model, ModelConfig};
use auranet::training::{
    self, ablate, line_search, steps_per_epoch, train_and_evaluate, train_on, RunDir, SweepParam, SweepValue, TrainConfig,
    TrainError, Variant,
};

/// A small plain U-net config so the loop tests run in seconds.
fn quick(side: usize, train: usize, test: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig { base_channels: 4, depth: 2, input_size: [side, side], ..ModelConfig::plain_unet() };
    cfg.dataset.target_size = side;
    cfg.dataset.train_count = train;
    cfg.dataset.test_count = test;
    cfg.epochs = 1;
    cfg
}

#[test]
fn steps_per_epoch_keeps_the_last_partial_batch() {
    assert_eq!(steps_per_epoch(23, 4), 6);
    assert_eq!(steps_per_epoch(24, 4), 6);
    assert_eq!(steps_per_epoch(1, 4), 1);
}

#[test]
fn dataset_one_protocol_runs_six_steps_per_epoch() {
    // 25 training images, 10% (floor) held out: 23 remain, ceil(23 / 4) = 6.
    let samples = common::synthetic_set::<f32>(35, 20, 24, 2);
    let mut cfg = quick(16, 25, 10);
    cfg.epochs = 2;
    let out = train_on(&cfg, &samples, None).unwrap();
    assert_eq!((out.split.train.len(), out.split.validation.len(), out.split.test.len()), (23, 2, 10));
    assert_eq!(out.history.steps, 12);
    assert_eq!(out.history.records.len(), 2);
    assert!(out.history.records.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
}

#[test]
fn identical_configs_give_byte_identical_runs() {
    let summary = common::suites::determinism().unwrap_or_else(|e| panic!("{e}"));
    println!("{summary}");
}

#[test]
fn run_directory_holds_the_full_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::suites::tiny_run_config(tmp.path());
    let run = RunDir::create(tmp.path().join("run")).unwrap();
    let samples = auranet::data::ingest::<f32>(&cfg.dataset).unwrap();
    let (out, report) = train_and_evaluate(&cfg, &samples, 0.5, Some(&run)).unwrap();
    for p in [run.snapshot(), run.manifest(), run.history(), run.best_checkpoint(), run.last_checkpoint(), run.metrics()] {
        assert!(p.exists(), "{}", p.display());
    }
    let csv = std::fs::read_to_string(run.history()).unwrap();
    assert_eq!(csv.lines().count(), 2);
    // The snapshot is a loadable train config.
    let snap: TrainConfig = toml::from_str(&std::fs::read_to_string(run.snapshot()).unwrap()).unwrap();
    assert_eq!(snap, cfg);
    assert_eq!(report.per_image.len(), out.split.test.len());

    // Reloading the selected checkpoint reproduces the metrics bit for bit.
    let (mut model, _) = Model::<f32>::load_checkpoint(&run.best_checkpoint()).unwrap();
    let prepared = training::prepare(&samples, cfg.dataset.target_size).unwrap();
    let test: Vec<_> = out.split.test.iter().map(|id| prepared.iter().find(|s| &s.id == id).unwrap()).collect();
    let again = training::evaluate(&mut model, &test, 0.5, cfg.batch_size).unwrap();
    assert_eq!(again, report);
    assert_eq!(serde_json::to_string_pretty(&again).unwrap(), std::fs::read_to_string(run.metrics()).unwrap());
}

#[test]
fn different_seeds_give_different_runs() {
    let samples = common::synthetic_set::<f32>(8, 16, 16, 3);
    let a = train_on(&quick(16, 6, 2), &samples, None).unwrap();
    let mut cfg = quick(16, 6, 2);
    cfg.seed = 1;
    let b = train_on(&cfg, &samples, None).unwrap();
    let (mut ma, mut mb) = (a.last, b.last);
    assert_ne!(ma.checksum(), mb.checksum());
}

#[test]
fn empty_validation_falls_back_to_training_images() {
    let samples = common::synthetic_set::<f32>(4, 16, 16, 5);
    let out = train_on(&quick(16, 3, 1), &samples, None).unwrap();
    // floor(0.1 * 3) = 0 validation images.
    assert!(out.split.validation.is_empty());
    assert!(out.history.records[0].val_loss.is_finite());
}

#[test]
fn nan_weights_are_reported_as_non_finite_loss() {
    use auranet::nn::Module;
    let samples = common::synthetic_set::<f32>(6, 16, 16, 6);
    let cfg = quick(16, 5, 1);
    let mut split = auranet::data::split(&samples, &cfg.dataset).unwrap();
    split.hold_out_validation(cfg.validation_fraction, cfg.seed);
    let mut model = Model::<f32>::build(&cfg.model, 0, None).unwrap();
    model.visit("", &mut |name, p| {
        if name == "head.weight" {
            p.value[0] = f32::NAN;
        }
    });
    match training::train_split(&cfg, &samples, split, model, None) {
        Err(TrainError::NonFiniteLoss { epoch: 0, batch }) => assert!(!batch.is_empty()),
        other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn mismatched_input_size_is_a_config_error() {
    let mut cfg = quick(16, 4, 1);
    cfg.model.input_size = [32, 32];
    assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
}

#[test]
fn ablation_shares_one_split_across_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let run = RunDir::create(tmp.path()).unwrap();
    let samples = common::synthetic_set::<f32>(6, 16, 16, 7);
    let mut base = quick(32, 4, 2);
    base.model.input_size = [32, 32];
    base.model.pretrained = false;
    let variants = [Variant { resnet: false, attention: false, ac_loss: false }, Variant { resnet: true, attention: true, ac_loss: true }];
    let table = ablate(&base, &variants, &samples, 0.5, Some(&run)).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[1].label, "AURA-net");
    assert_eq!(table.manifest, std::fs::read_to_string(run.manifest()).unwrap());
    for sub in ["u_net", "aura_net"] {
        let m = std::fs::read_to_string(tmp.path().join(sub).join("split.manifest")).unwrap();
        let sub_split = auranet::data::Split::from_manifest(&m).unwrap();
        let shared = auranet::data::Split::from_manifest(&table.manifest).unwrap();
        assert_eq!(sub_split.test, shared.test);
    }
    let rendered = table.render();
    assert!(rendered.contains("AURA-net") && rendered.contains("Dice"));
}

#[test]
fn single_point_line_search() {
    let samples = common::synthetic_set::<f32>(6, 16, 16, 8);
    let base = quick(16, 5, 1);
    let table = line_search(SweepParam::Lambda, &[SweepValue::Lambda(5.0)], &base, &samples, 0.5, None).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert!(table.rows[0].val_loss.is_finite());
    assert!(line_search(SweepParam::Lambda, &[SweepValue::BetaGamma(1.0, 0.0)], &base, &samples, 0.5, None).is_err());
    assert!(line_search(SweepParam::Lambda, &[], &base, &samples, 0.5, None).is_err());
}

#[test]
fn small_overfit_run() {
    let summary = common::suites::overfit(64, 200).unwrap_or_else(|e| panic!("{e}"));
    println!("{summary}");
}
