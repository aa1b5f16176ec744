use sad_core::datagen::{build_dataset, DatagenConfig, Dataset, Method};
use sad_core::env::{EnvFamily, Split};
use sad_core::model::{ModelConfig, ModelParams};
use sad_core::trainer::{evaluate_loss, train, TrainConfig, TrainError};

fn bandit(size: usize, seed: u64) -> Dataset {
    build_dataset("gaussian_bandit", Split::Train, &DatagenConfig::new(Method::Sad, 100, 20, size), seed).unwrap()
}

fn bandit_model() -> ModelConfig {
    ModelConfig::standard(&EnvFamily::GaussianBandit.spec(), 20)
}

#[test]
fn single_batch_overfits() {
    let ds = build_dataset("darkroom", Split::Train, &DatagenConfig::new(Method::Sad, 10, 49, 32), 5).unwrap();
    let model = ModelConfig::standard(&EnvFamily::Darkroom.spec(), 49);
    let mut cfg = TrainConfig::new(1000, 1);
    cfg.batch_size = 32;
    cfg.lr = 1e-3;
    let (params, report) = train::<f32>(&ds, &model, &cfg).unwrap();
    let last = *report.epoch_losses.last().unwrap();
    assert!(last < 0.05, "final epoch loss {last}");
    let held = evaluate_loss(&params, &ds).unwrap();
    assert!(held < 0.05, "loss on the training set {held}");
}

#[test]
fn first_epoch_beats_the_uniform_loss() {
    let ds = bandit(1000, 2);
    let (_, report) = train::<f32>(&ds, &bandit_model(), &TrainConfig::new(1, 3)).unwrap();
    assert!(report.epoch_losses[0] < 5f64.ln(), "{:?}", report.epoch_losses);
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let ds = bandit(200, 4);
    let mut cfg = TrainConfig::new(3, 9);
    cfg.lr = 0.0;
    let (params, report) = train::<f64>(&ds, &bandit_model(), &cfg).unwrap();
    assert_eq!(params, ModelParams::<f64>::init(&bandit_model(), 9).unwrap());
    for l in &report.epoch_losses {
        assert!((l - report.epoch_losses[0]).abs() < 1e-12, "{:?}", report.epoch_losses);
    }
}

#[test]
fn runs_are_reproducible() {
    let ds = bandit(150, 6);
    let mut cfg = TrainConfig::new(2, 11);
    cfg.lr = 1e-3;
    let (_, a) = train::<f32>(&ds, &bandit_model(), &cfg).unwrap();
    let (_, b) = train::<f32>(&ds, &bandit_model(), &cfg).unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.checksum, b.checksum);
    cfg.shuffle_seed = 12;
    let (_, c) = train::<f32>(&ds, &bandit_model(), &cfg).unwrap();
    assert_ne!(a.checksum, c.checksum);
}

#[test]
fn untrained_loss_is_ln_a_and_zero_weights_give_zero() {
    let ds = bandit(100, 7);
    let params = ModelParams::<f64>::init(&bandit_model(), 1).unwrap();
    assert!((evaluate_loss(&params, &ds).unwrap() - 5f64.ln()).abs() < 1e-12);
    let mut zero = ds.clone();
    zero.samples.iter_mut().for_each(|s| s.weight = 0.0);
    assert_eq!(evaluate_loss(&params, &zero).unwrap(), 0.0);
}

#[test]
fn rejects_empty_and_mismatched_datasets() {
    let mut empty = bandit(1, 8);
    empty.samples.clear();
    assert!(matches!(train::<f32>(&empty, &bandit_model(), &TrainConfig::new(1, 0)), Err(TrainError::EmptyDataset)));
    let params = ModelParams::<f64>::init(&bandit_model(), 1).unwrap();
    assert!(matches!(evaluate_loss(&params, &empty), Err(TrainError::EmptyDataset)));

    let grid = build_dataset("darkroom", Split::Train, &DatagenConfig::new(Method::Sad, 10, 20, 4), 1).unwrap();
    assert!(matches!(train::<f32>(&grid, &bandit_model(), &TrainConfig::new(1, 0)), Err(TrainError::ShapeMismatch(_))));
    let short = ModelConfig::standard(&EnvFamily::GaussianBandit.spec(), 10);
    assert!(matches!(train::<f32>(&bandit(4, 1), &short, &TrainConfig::new(1, 0)), Err(TrainError::ShapeMismatch(_))));
}
