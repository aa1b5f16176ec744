mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sad_core::datagen::{build_dataset, collect_context, Context, DatagenConfig, Method};
use sad_core::env::{sample_env, ActionId, EnvFamily, Policy, Split, StateVec, Transition};
use sad_core::model::{
    choose, gradient_check, LabeledSequence, ModelConfig, ModelError, ModelParams, PredictMode, Sequence,
};
use sad_core::rng::RngStream;

fn config(family: EnvFamily, max_context: usize) -> ModelConfig {
    ModelConfig::standard(&family.spec(), max_context)
}

fn context(family: &str, len: usize, seed: u64) -> (Context, StateVec) {
    let mut rng = RngStream::new(seed, 0);
    let mut env = sample_env(family, Split::Train, &mut rng).unwrap();
    let ctx = collect_context(&mut env, &Policy::UniformRandom, len, &mut rng).unwrap();
    let query = env.reset();
    (ctx, query)
}

/// Freshly initialised parameters with the action head randomised, so every
/// layer influences the logits.
fn live_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p: ModelParams<f64> = ModelParams::init(cfg, seed).unwrap();
    let donor: ModelParams<f64> = ModelParams::init(cfg, seed + 1000).unwrap();
    let w = donor.get("embed.w").data().to_vec();
    let head = p.tensors.get_mut("head.w").unwrap().data_mut();
    for (i, v) in head.iter_mut().enumerate() {
        *v = w[i % w.len()] * 20.0;
    }
    p
}

#[test]
fn zero_head_gives_uniform_logits_and_ln_a_loss() {
    let cfg = config(EnvFamily::Darkroom, 49);
    let p: ModelParams<f64> = ModelParams::init(&cfg, 3).unwrap();
    let (ctx, q) = context("darkroom", 20, 1);
    let logits = p.forward(&ctx.transitions, &q).unwrap();
    assert_eq!(logits.shape(), &[21, 5]);
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let item = LabeledSequence { seq: Sequence { context: &ctx.transitions, query: &q }, label: ActionId(2), weight: 1.0 };
    let loss = p.batch_loss(&[item]).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn zero_weight_gives_zero_loss_and_gradient() {
    let cfg = config(EnvFamily::GaussianBandit, 30);
    let p = live_params(&cfg, 4);
    let (ctx, q) = context("gaussian_bandit", 30, 2);
    let item = LabeledSequence { seq: Sequence { context: &ctx.transitions, query: &q }, label: ActionId(1), weight: 0.0 };
    let (loss, grads) = p.loss_and_grad(&[item]).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.values().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn confident_correct_logits_drive_the_loss_to_zero() {
    let cfg = config(EnvFamily::GaussianBandit, 4);
    let mut p: ModelParams<f64> = ModelParams::init(&cfg, 5).unwrap();
    p.tensors.get_mut("head.b").unwrap().data_mut()[3] = 50.0;
    let (ctx, q) = context("gaussian_bandit", 4, 2);
    let item = LabeledSequence { seq: Sequence { context: &ctx.transitions, query: &q }, label: ActionId(3), weight: 1.0 };
    assert!(p.batch_loss(&[item]).unwrap() < 1e-20);
}

#[test]
fn rows_ignore_future_transitions_exactly() {
    let cfg = config(EnvFamily::Darkroom, 49);
    let p = live_params(&cfg, 6);
    let (ctx, q) = context("darkroom", 30, 3);
    let base = p.forward(&ctx.transitions, &q).unwrap();
    let mut perturbed = ctx.transitions.clone();
    for t in &mut perturbed[12..] {
        t.reward += 1.0;
        t.action = ActionId((t.action.0 + 1) % 5);
    }
    let other = p.forward(&perturbed, &q).unwrap();
    for j in 0..=12 {
        assert_eq!(base.row(j), other.row(j), "row {j}");
    }
    assert_ne!(base.row(13), other.row(13));
}

#[test]
fn batched_forward_matches_single_forward() {
    let cfg = config(EnvFamily::GaussianBandit, 40);
    let p = live_params(&cfg, 7);
    let seqs: Vec<(Context, StateVec)> = (0..4).map(|i| context("gaussian_bandit", 10 * i + 1, 10 + i as u64)).collect();
    let refs: Vec<Sequence<'_>> = seqs.iter().map(|(c, q)| Sequence { context: &c.transitions, query: q }).collect();
    let batch = p.forward_batch(&refs).unwrap();
    for (b, (c, q)) in batch.iter().zip(&seqs) {
        let single = p.forward(&c.transitions, q).unwrap();
        for (x, y) in b.data().iter().zip(single.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn golden_logits() {
    let cfg = config(EnvFamily::Darkroom, 49);
    let p = live_params(&cfg, 8);
    let (ctx, q) = context("darkroom", 6, 4);
    let logits = p.forward(&ctx.transitions, &q).unwrap();
    let rounded: Vec<f64> = logits.data().iter().map(|v| (v * 1e9).round() / 1e9).collect();
    common::check_golden("model_logits", &rounded);
}

#[test]
fn greedy_picks_the_largest_logit() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(choose(&[0.0, 3.0, 0.0, 0.0, 0.0], PredictMode::Greedy, &mut rng), ActionId(1));
    assert_eq!(choose(&[1.0, 0.0, 1.0], PredictMode::Greedy, &mut rng), ActionId(0));
}

#[test]
fn sampling_equal_logits_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..draws {
        counts[choose(&[0.7; 5], PredictMode::Sample, &mut rng).0] += 1;
    }
    let p = 0.2;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn empty_context_predicts_from_the_query_row() {
    let cfg = config(EnvFamily::Darkroom, 49);
    let p = live_params(&cfg, 9);
    let q = StateVec(vec![3.0, 3.0]);
    let logits = p.forward(&[], &q).unwrap();
    assert_eq!(logits.shape(), &[1, 5]);
    let row: Vec<f64> = logits.row(0).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(p.predict(&[], &q, PredictMode::Greedy, &mut rng).unwrap(), choose(&row, PredictMode::Greedy, &mut rng));
}

#[test]
fn context_longer_than_max_is_rejected() {
    let cfg = config(EnvFamily::GaussianBandit, 5);
    let p: ModelParams<f32> = ModelParams::init(&cfg, 1).unwrap();
    let (ctx, q) = context("gaussian_bandit", 6, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        p.predict(&ctx.transitions, &q, PredictMode::Greedy, &mut rng),
        Err(ModelError::ContextTooLong { len: 6, max: 5 })
    ));
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let ds = build_dataset("darkroom", Split::Train, &DatagenConfig::new(Method::Sad, 10, 12, 3), 2).unwrap();
    let cfg = config(EnvFamily::Darkroom, 12);
    let p = live_params(&cfg, 10);
    let items: Vec<LabeledSequence<'_>> = ds.samples.iter().map(LabeledSequence::from).collect();
    let err = gradient_check(&p, &items, 20, 1e-5, 1).unwrap();
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn checkpoint_round_trip() {
    let cfg = config(EnvFamily::GaussianBandit, 100);
    let p = live_params(&cfg, 12);
    let dir = tempfile::tempdir().unwrap();
    p.save(dir.path(), serde_json::json!({"note": "x"})).unwrap();
    let (back, manifest) = ModelParams::<f64>::load(dir.path()).unwrap();
    assert_eq!(back, p);
    assert_eq!(manifest.checksum, p.checksum());
    assert_eq!(manifest.element_width, 8);

    let mut bytes = std::fs::read(dir.path().join("model.bin")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(dir.path().join("model.bin"), bytes).unwrap();
    assert!(ModelParams::<f64>::load(dir.path()).is_err());
}

#[test]
fn tokens_put_the_query_first_and_scale_states() {
    let cfg = config(EnvFamily::Darkroom, 49);
    let t = Transition { state: StateVec(vec![6.0, 0.0]), action: ActionId(3), reward: 1.0, next_state: StateVec(vec![6.0, 1.0]) };
    let tokens = cfg.tokenize(&[t], &StateVec(vec![3.0, 6.0]));
    let d = cfg.token_dim();
    assert_eq!(tokens.len(), 2 * d);
    assert_eq!(&tokens[..2], &[3.0 / 6.0, 1.0]);
    assert!(tokens[2..d].iter().all(|&v| v == 0.0));
    assert_eq!(&tokens[d..2 * d], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0 / 6.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prefix_predictions_are_consistent(seed in 0u64..1000, len in 1usize..30, cut in 0usize..30) {
        let cut = cut.min(len);
        let cfg = config(EnvFamily::GaussianBandit, 30);
        let p = live_params(&cfg, seed % 7);
        let (ctx, q) = context("gaussian_bandit", len, seed);
        let long = p.forward(&ctx.transitions, &q).unwrap();
        let short = p.forward(&ctx.transitions[..cut], &q).unwrap();
        prop_assert_eq!(short.row(cut), long.row(cut));
    }

    #[test]
    fn loss_is_non_negative(seed in 0u64..1000, label in 0usize..5, weight in 0.0f64..3.0) {
        let cfg = config(EnvFamily::GaussianBandit, 10);
        let p = live_params(&cfg, seed % 5);
        let (ctx, q) = context("gaussian_bandit", 10, seed);
        let item = LabeledSequence { seq: Sequence { context: &ctx.transitions, query: &q }, label: ActionId(label), weight };
        prop_assert!(p.batch_loss(&[item]).unwrap() >= 0.0);
    }
}
