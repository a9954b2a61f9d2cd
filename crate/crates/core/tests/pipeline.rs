use groupdir::checkpoint::Checkpoint;
use groupdir::datagen::{generate, SynthConfig};
use groupdir::eval::full_report;
use groupdir::grouping::{group_counts, ShotThresholds};
use groupdir::training::{evaluate_objective, train, Model, TrainConfig};

#[test]
fn training_lowers_the_objective_on_the_default_task() {
    let splits = generate(&SynthConfig { seed: 2, ..SynthConfig::default() }).unwrap();
    let config = TrainConfig { seed: 2, ..TrainConfig::default() };
    let initial = Model::init(&config, splits.train.feature_dim()).unwrap();
    let before = evaluate_objective(&initial, &config, &splits.train).unwrap();
    let out = train(&config, &splits.train, &splits.val).unwrap();
    let after = evaluate_objective(&out.model, &config, &splits.train).unwrap();
    assert_eq!(out.history.records.len(), config.epochs);
    assert!(after.total < before.total, "L_final {} -> {}", before.total, after.total);
    let last = out.history.last().unwrap();
    assert!(last.val_mae_gt.is_finite() && last.val_mae_cls.is_finite());
}

#[test]
fn a_single_sample_tail_batch_trains() {
    let splits = generate(&SynthConfig { n_train: 33, n_val: 10, n_test: 0, ..SynthConfig::default() }).unwrap();
    let config = TrainConfig { batch_size: 16, epochs: 2, stage2_epochs: 1, ..TrainConfig::default() };
    let out = train(&config, &splits.train, &splits.val).unwrap();
    assert_eq!(out.history.records.len(), 3);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let splits = generate(&SynthConfig { n_train: 200, n_val: 50, n_test: 50, ..SynthConfig::default() }).unwrap();
    let config = TrainConfig { epochs: 2, num_groups: 6, ..TrainConfig::default() };
    let out = train(&config, &splits.train, &splits.val).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("ckpt.json");
    Checkpoint::new(config.clone(), out.model.clone()).save(&file).unwrap();
    let loaded = Checkpoint::load(&file).unwrap();

    let scheme = config.scheme().unwrap();
    let counts = group_counts(&splits.train.labels, &scheme).unwrap();
    let a = full_report(&out.model, &splits.test, ShotThresholds::default(), &counts).unwrap();
    let b = full_report(&loaded.model, &splits.test, ShotThresholds::default(), &counts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn lds_and_vanilla_variants_train() {
    let splits = generate(&SynthConfig { n_train: 200, n_val: 50, n_test: 0, ..SynthConfig::default() }).unwrap();
    let lds = TrainConfig { epochs: 2, use_lds: true, ..TrainConfig::default() };
    assert!(train(&lds, &splits.train, &splits.val).is_ok());
    let vanilla = TrainConfig { epochs: 2, ..TrainConfig::default() }.vanilla();
    let out = train(&vanilla, &splits.train, &splits.val).unwrap();
    assert_eq!(out.model.params.experts.len(), 1);
}
