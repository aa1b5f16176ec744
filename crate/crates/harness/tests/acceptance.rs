//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Trained models are cached under `target/acceptance`, keyed by the hash of
//! everything that determines their weights, so only the first run pays for
//! training. Set `SAD_ACCEPTANCE_ONLY=1,3` to run a subset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use sad_core::datagen::{build_dataset, Dataset, DatagenConfig, Method};
use sad_core::env::{EnvFamily, GoalSplit, Policy, Split};
use sad_core::eval::{MetricKind, MetricSeries};
use sad_core::model::{gradient_check, LabeledSequence, ModelConfig, ModelParams};
use sad_core::oracle::{
    argmax_set, assumption_check, grid_optimal_actions, label_accuracy, query_coverage, random_label_density, value_iteration,
};
use sad_core::suite::{Cell, GridParams};
use sad_core::trainer::{evaluate_loss, train, TrainConfig};
use sad_harness::pipeline::{cmd_eval, dataset_path, ensure_trained, stored_losses, Setting};
use sad_harness::ExperimentConfig;

/// Label accuracy of 1000 SAD Darkroom samples at trust horizon 49 (master
/// seed 1), measured once by the oracle and frozen.
const FROZEN_N49_ACCURACY: f64 = 0.562;
/// Relative drop in bandit suboptimality from context 1 to 100.
const MIN_CONTEXT_GAIN: f64 = 0.30;
/// Late-to-early regret slope ratio.
const MAX_SLOPE_RATIO: f64 = 0.5;
/// Online Darkroom return over the uniform-random return.
const MIN_RANDOM_FACTOR: f64 = 2.0;
const SEEDS: usize = 4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cache_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance")
}

fn experiment(name: &str, text: &str) -> ExperimentConfig {
    let dir = cache_root().join(name);
    let text = format!("output_dir = {:?}\n{text}", dir.display().to_string());
    ExperimentConfig::from_toml(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn bandit(method: &str) -> ExperimentConfig {
    experiment(
        &format!("bandit_{method}"),
        &format!(
            r#"
family = "gaussian_bandit"
method = "{method}"
master_seed = 100
runs = {SEEDS}

[datagen]
trust_horizon = 1000
context_len = 100
dataset_size = 20000

[train]
epochs = 3
lr = 1e-3
batch_size = 64
shuffle_seed = 100

[eval]
num_test_envs = 200
horizons = [1, 5, 10, 25, 50, 75, 100]
online_steps = 200
online_context_cap = 100
"#
        ),
    )
}

fn darkroom(name: &str, method: &str, trust_horizon: usize, epochs: usize) -> ExperimentConfig {
    experiment(
        name,
        &format!(
            r#"
family = "darkroom"
method = "{method}"
master_seed = 200
runs = {SEEDS}

[datagen]
trust_horizon = {trust_horizon}
context_len = 49
dataset_size = 10000

[train]
epochs = {epochs}
lr = 1e-3
batch_size = 16
shuffle_seed = 200

[eval]
num_test_envs = 20
horizons = [1, 10, 25, 49]
online_episodes = 40
online_context_cap = 49
"#
        ),
    )
}

/// Trust horizon of the main Darkroom runs.
const DARKROOM_N: usize = 10;
const DARKROOM_EPOCHS: usize = 40;

fn darkroom_main(method: &str) -> ExperimentConfig {
    darkroom(&format!("darkroom_{method}"), method, DARKROOM_N, DARKROOM_EPOCHS)
}

fn trained(cfg: &ExperimentConfig) -> ExperimentConfig {
    let t = Instant::now();
    ensure_trained(cfg).unwrap_or_else(|e| panic!("{}: {e}", cfg.output_dir.display()));
    eprintln!("  [{} {} ready in {:.0}s]", cfg.family, cfg.method, t.elapsed().as_secs_f64());
    cfg.clone()
}

/// Evaluates every run and returns the per-run curves of the method.
fn per_run(cfg: &ExperimentConfig, setting: Setting) -> Vec<MetricSeries> {
    cmd_eval(cfg, setting).unwrap();
    (0..cfg.runs)
        .map(|r| {
            let path = sad_harness::pipeline::run_metrics_path(cfg, r, setting);
            MetricSeries::read_csv(&fs::read_to_string(path).unwrap()).unwrap().remove(0)
        })
        .collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_err(v: &[f64]) -> f64 {
    let m = mean(v.iter().copied());
    let n = v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
}

fn at(s: &MetricSeries, x: usize) -> f64 {
    s.at(x).unwrap_or_else(|| panic!("no point at {x}"))
}

fn last10(s: &MetricSeries) -> f64 {
    mean(s.mean[s.mean.len() - 10..].iter().copied())
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::standard(&EnvFamily::Darkroom.spec(), 49);
    let ds = build_dataset("darkroom", Split::Train, &DatagenConfig::new(Method::Sad, 10, 49, 4), 1).unwrap();
    // A few training steps move every parameter, including the zero-initialised head.
    let mut tc = TrainConfig::new(3, 1);
    tc.lr = 1e-2;
    tc.batch_size = 4;
    let (p, _) = train::<f64>(&ds, &cfg, &tc).unwrap();
    let items: Vec<LabeledSequence<'_>> = ds.samples.iter().map(LabeledSequence::from).collect();
    let err = gradient_check(&p, &items, 20, 1e-5, 7).unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(err <= 1e-4 && secs < 60.0, format!("max relative error {err:.2e} over 20 probes (<= 1e-4), {secs:.1}s (< 60s)"))
}

fn criterion_2() -> Outcome {
    let policy = Policy::UniformRandom;
    let big = assumption_check("gaussian_bandit", &policy, 1000, 500, 2).unwrap().agreement_rate;
    let rates: Vec<f64> = [10, 100, 1000]
        .iter()
        .map(|&n| assumption_check("gaussian_bandit", &policy, n, 500, 3).unwrap().agreement_rate)
        .collect();
    let monotone = rates.windows(2).all(|w| w[0] <= w[1]);
    outcome(
        big >= 0.90 && monotone,
        format!("agreement at N=1000: {big:.3} (>= 0.90); N=10/100/1000 on paired instances: {rates:.3?} (non-decreasing)"),
    )
}

fn criterion_3() -> Outcome {
    let mut vi_ok = true;
    for template in [GridParams::darkroom(Cell::new(0, 0)), GridParams::darkroom_large(Cell::new(0, 0))] {
        for goal in template.cells().collect::<Vec<_>>() {
            let g = GridParams { goal, ..template };
            let q = value_iteration(&g, 0.99, g.horizon);
            vi_ok &= g.cells().all(|s| argmax_set(&q[g.index_of(s)], 1e-12) == grid_optimal_actions(&g, s));
        }
    }
    let sad = |n: usize, size: usize, seed: u64| -> Dataset {
        build_dataset("darkroom", Split::Train, &DatagenConfig::new(Method::Sad, n, 0, size), seed).unwrap()
    };
    let d1: Vec<f64> = [2, 10, 49]
        .iter()
        .map(|&n| label_accuracy(&sad(n, 1000, 5)).unwrap().per_distance.get(&1).copied().unwrap_or(0.0))
        .collect();
    let frozen = sad(49, 1000, 1);
    let rate = label_accuracy(&frozen).unwrap().agreement_rate;
    let density = random_label_density(&frozen).unwrap();
    let ratio = rate / density;
    let pass = vi_ok && d1.iter().all(|&r| r == 1.0) && (rate - FROZEN_N49_ACCURACY).abs() <= 0.03 && ratio >= 2.0;
    outcome(
        pass,
        format!(
            "value iteration agreement 7x7 and 10x10: {vi_ok}; distance-1 label rate at N=2/10/49: {d1:?} (1.0); \
             N=49 accuracy {rate:.3} vs frozen {FROZEN_N49_ACCURACY} (+-0.03); ratio to random-label density {density:.3}: {ratio:.2} (>= 2)"
        ),
    )
}

fn criterion_4() -> Outcome {
    let sad = trained(&bandit("SAD"));
    let dpt = trained(&bandit("DPT_random"));
    let off = per_run(&sad, Setting::Offline);
    let off_dpt = per_run(&dpt, Setting::Offline);
    let s1 = mean(off.iter().map(|s| at(s, 1)));
    let s100 = mean(off.iter().map(|s| at(s, 100)));
    let d100 = mean(off_dpt.iter().map(|s| at(s, 100)));
    let gain = (s1 - s100) / s1;
    let on = per_run(&sad, Setting::Online);
    let r = |x: usize| mean(on.iter().map(|s| at(s, x)));
    let early = r(50) / 50.0;
    let late = (r(200) - r(150)) / 50.0;
    let ratio = late / early;
    let (a, b, c) = (gain >= MIN_CONTEXT_GAIN, s100 < d100, ratio < MAX_SLOPE_RATIO);
    outcome(
        a && b && c,
        format!(
            "(a) SAD suboptimality h=1 {s1:.4} -> h=100 {s100:.4}, drop {:.1}% (>= {:.0}%): {}; \
             (b) DPT_random at h=100 {d100:.4} > SAD: {}; \
             (c) regret slope steps 150-200 {late:.4}/step vs 1-50 {early:.4}/step, ratio {ratio:.2} (< {MAX_SLOPE_RATIO}): {}",
            100.0 * gain,
            100.0 * MIN_CONTEXT_GAIN,
            verdict(a),
            verdict(b),
            verdict(c)
        ),
    )
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn online_returns(cfg: &ExperimentConfig) -> (Vec<MetricSeries>, Vec<MetricSeries>) {
    let method = per_run(cfg, Setting::Online);
    let all = MetricSeries::read_csv(&fs::read_to_string(sad_harness::pipeline::metrics_path(cfg, Setting::Online)).unwrap()).unwrap();
    let uniform = all.into_iter().filter(|s| s.method == "uniform").collect();
    (method, uniform)
}

fn criterion_5() -> Outcome {
    let sad = trained(&darkroom_main("SAD"));
    let dpt = trained(&darkroom_main("DPT_random"));
    let (on, uniform) = online_returns(&sad);
    let (on_dpt, _) = online_returns(&dpt);
    assert_eq!(uniform[0].kind, MetricKind::ReturnVsEpisode);
    let ours = mean(on.iter().map(last10));
    let theirs = mean(on_dpt.iter().map(last10));
    let random = last10(&uniform[0]);
    let (a, b) = (ours >= MIN_RANDOM_FACTOR * random, ours > theirs);
    outcome(
        a && b,
        format!(
            "SAD mean return over episodes 31-40: {ours:.2}; (a) uniform-random policy {random:.2}, factor {:.2} (>= {MIN_RANDOM_FACTOR}): {}; \
             (b) DPT_random {theirs:.2} < SAD: {}",
            ours / random,
            verdict(a),
            verdict(b)
        ),
    )
}

fn criterion_6() -> Outcome {
    let ns = [2, 10, 25, 49];
    let mut coverage = Vec::new();
    let mut returns = Vec::new();
    let mut errs = Vec::new();
    for &n in &ns {
        let cfg = if n == DARKROOM_N { darkroom_main("SAD") } else { darkroom(&format!("darkroom_SAD_N{n}"), "SAD", n, DARKROOM_EPOCHS) };
        let cfg = trained(&cfg);
        let mut ds = Dataset::load(&dataset_path(&cfg, 0)).unwrap();
        ds.samples.truncate(1000);
        coverage.push(query_coverage(&ds).unwrap());
        let off = per_run(&cfg, Setting::Offline);
        let finals: Vec<f64> = off.iter().map(|s| at(s, 49)).collect();
        returns.push(mean(finals.iter().copied()));
        errs.push(std_err(&finals));
    }
    let grows = coverage.windows(2).all(|w| w[0].distinct_queries < w[1].distinct_queries);
    let concentrates = coverage.windows(2).all(|w| w[0].near_goal_fraction > w[1].near_goal_fraction);
    let best_end = returns[0].max(returns[3]);
    let (best_mid, mid_idx) = if returns[1] >= returns[2] { (returns[1], 1) } else { (returns[2], 2) };
    // Tied-best: within one standard error (across seeds) of the best endpoint.
    let interior = best_mid >= best_end - errs[mid_idx];
    let distinct: Vec<usize> = coverage.iter().map(|c| c.distinct_queries).collect();
    let near: Vec<String> = coverage.iter().map(|c| format!("{:.3}", c.near_goal_fraction)).collect();
    let rets: Vec<String> = returns.iter().zip(&errs).map(|(r, e)| format!("{r:.2}+-{e:.2}")).collect();
    outcome(
        grows && concentrates && interior,
        format!(
            "N=2/10/25/49: distinct queries per 1000 {distinct:?} (strictly increasing: {}); near-goal share {near:?} (strictly decreasing: {}); \
             offline return at h=49 {rets:?} (interior best or tied-best: {})",
            verdict(grows),
            verdict(concentrates),
            verdict(interior)
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut cfg = trained(&bandit("SAD"));
    cfg.eval_family = Some("bernoulli_bandit".into());
    cfg.validate().unwrap();
    let series = cmd_eval(&cfg, Setting::Offline).unwrap();
    let model = at(&series[0], 100);
    let uniform = at(&series[1], 100);
    outcome(
        model < uniform,
        format!("Gaussian-pretrained SAD on Bernoulli, suboptimality at h=100 {model:.4} vs uniform-random exact expectation {uniform:.4}"),
    )
}

fn csv_snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv" || x == "jsonl") {
                let bytes = fs::read(&p).unwrap();
                out.push((p, bytes));
            }
        }
    }
    out.sort();
    out
}

fn criterion_8() -> Outcome {
    let root = cache_root().join("reproducibility");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();
    let mut cfg = darkroom("reproducibility/a", "SAD", 10, 2);
    cfg.runs = 2;
    cfg.datagen.dataset_size = 300;
    cfg.eval.num_test_envs = 5;
    cfg.eval.online_episodes = 3;
    let path = root.join("exp.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    let sad = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_sad")).args(args).output().unwrap();
        assert!(out.status.success(), "sad {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let p = path.to_str().unwrap();
    let pipeline = || {
        for verb in ["generate", "train", "eval-offline", "eval-online"] {
            sad(&[verb, "--config", p, "--reference-path"]);
        }
        csv_snapshot(&cfg.output_dir)
    };
    let first = pipeline();
    let second = pipeline();
    let identical = first == second && !first.is_empty();
    let threaded = root.join("threaded");
    sad(&["generate", "--config", p, "--threads", "4", "--out", threaded.to_str().unwrap()]);
    let thread_ok =
        (0..cfg.runs).all(|r| fs::read(dataset_path(&cfg, r)).unwrap() == fs::read(threaded.join(format!("run_{r}/dataset.jsonl"))).unwrap());
    outcome(
        identical && thread_ok,
        format!(
            "{} dataset and metric files byte-identical across reference-path reruns: {}; datasets identical with --threads 4: {}",
            first.len(),
            verdict(identical),
            verdict(thread_ok)
        ),
    )
}

fn smoothed_non_increasing(losses: &[f64]) -> bool {
    let l = &losses[..losses.len().min(20)];
    let smooth: Vec<f64> = (0..l.len()).map(|i| mean(l[i.saturating_sub(2)..=i].iter().copied())).collect();
    smooth.windows(2).all(|w| w[1] <= w[0] * 1.02)
}

fn criterion_9() -> Outcome {
    let mut untrained_ok = true;
    let mut worst = 0.0f64;
    let mut curve_ok = true;
    let mut notes = Vec::new();
    for method in ["SAD", "AD", "DPT_random", "DIT"] {
        let cfg = if method == "SAD" || method == "DPT_random" {
            darkroom_main(method)
        } else {
            let mut c = darkroom(&format!("darkroom_{method}"), method, DARKROOM_N, 20);
            c.runs = 1;
            c
        };
        let cfg = trained(&cfg);
        let ds = Dataset::load(&dataset_path(&cfg, 0)).unwrap();
        let p = ModelParams::<f64>::init(&cfg.model_config().unwrap(), 1).unwrap();
        // The loss is a weighted mean; DIT weights sum to one per episode, so
        // normalise by the mean weight to recover the per-sample NLL.
        let mean_weight = mean(ds.samples.iter().map(|s| s.weight));
        let l = evaluate_loss(&p, &ds).unwrap() / mean_weight;
        worst = worst.max((l - 5f64.ln()).abs());
        untrained_ok &= (l - 5f64.ln()).abs() <= 1e-6;
        for r in 0..cfg.runs {
            let losses = stored_losses(&cfg, r).unwrap();
            let ok = smoothed_non_increasing(&losses);
            curve_ok &= ok;
            if !ok {
                notes.push(format!("{method} run {r}: {:.4?}", &losses[..losses.len().min(20)]));
            }
        }
    }
    let ds = build_dataset("darkroom", Split::Train, &DatagenConfig::new(Method::Sad, 10, 49, 32), 5).unwrap();
    let mut tc = TrainConfig::new(1000, 1);
    tc.batch_size = 32;
    tc.lr = 1e-3;
    let (_, report) = train::<f32>(&ds, &ModelConfig::standard(&EnvFamily::Darkroom.spec(), 49), &tc).unwrap();
    let overfit = *report.epoch_losses.last().unwrap();
    outcome(
        untrained_ok && overfit < 0.05 && curve_ok,
        format!(
            "untrained weight-normalised loss max |l - ln 5| {worst:.1e} (<= 1e-6); single-batch loss after 1000 epochs {overfit:.4} (< 0.05); \
             3-epoch smoothed loss over the first 20 epochs non-increasing within 2% for SAD, AD, DPT_random, DIT: {}{}",
            verdict(curve_ok),
            if notes.is_empty() { String::new() } else { format!(" [{}]", notes.join("; ")) }
        ),
    )
}

fn main() -> ExitCode {
    // Fail fast if the Darkroom goal split has changed under the frozen value.
    assert_eq!(GoalSplit::new(&GridParams::darkroom(Cell::new(0, 0)), 1).train.len(), 39);
    let only: Option<Vec<usize>> =
        std::env::var("SAD_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    type Criterion = (usize, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        (1, "gradient integrity", criterion_1),
        (2, "bandit label optimality", criterion_2),
        (3, "grid label optimality", criterion_3),
        (4, "bandit in-context improvement", criterion_4),
        (5, "darkroom online return", criterion_5),
        (6, "trust-horizon trade-off", criterion_6),
        (7, "out-of-distribution transfer", criterion_7),
        (8, "reproducibility", criterion_8),
        (9, "loss sanity", criterion_9),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        failed += (!o.pass) as usize;
        println!("criterion {id} ({name}): {} [{:.0}s] {}", if o.pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64(), o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
