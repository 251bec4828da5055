//! Acceptance criteria for the dynamic generative memory.
//!
//! Each test prints one `PASS`/`FAIL` line straight to stderr, so the lines
//! show up even when libtest captures output. The split-digit criteria need
//! the IDX files under `data/mnist` (or `$DGM_DATA_DIR`); they are fetched
//! with `scripts/prepare_mnist.py` when missing.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dgm_core::config::RunConfig;
use dgm_core::masks::{AnnealSchedule, MaskVariant};
use dgm_core::selftest::{
    expansion_arithmetic, freeze_exactness, gradient_check, regularizer_bounds, replay_stability,
    GRAD_TOLERANCE,
};
use dgm_core::trainer::{
    build_stream, joint_train_baseline, run_stream, MetricsLedger, DATA_DIR_ENV,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn verdict(name: &str, passed: bool, elapsed: Duration, detail: &str) -> bool {
    let tag = if passed { "PASS" } else { "FAIL" };
    let line = format!(
        "\n{tag} {name:<26} {:>8.1}s  {detail}\n",
        elapsed.as_secs_f64()
    );
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(line.as_bytes());
    passed
}

fn config(file: &str, overrides: &[&str]) -> RunConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::load(workspace().join("configs").join(file), &overrides)
        .expect("shipped config parses")
}

fn run(cfg: &RunConfig) -> MetricsLedger {
    let loaded = build_stream(cfg).expect("stream builds");
    run_stream(cfg.clone(), &loaded, None)
        .expect("run completes")
        .ledger
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn freeze_exactness_after_three_tasks() {
    let start = Instant::now();
    let f = freeze_exactness(0, None).unwrap();
    let el = start.elapsed();
    let ok = f.checked > 0 && f.changed == 0 && el < Duration::from_secs(300);
    let detail = format!(
        "{} entries frozen after task 1, {} changed by task 3",
        f.checked, f.changed
    );
    assert!(verdict("freeze exactness", ok, el, &detail));
}

#[test]
fn replay_of_task_one_is_bit_stable() {
    let start = Instant::now();
    let f = replay_stability(0, None).unwrap();
    let ok = f.checked > 0 && f.changed == 0;
    let detail = format!(
        "{} sample values compared, {} changed",
        f.checked, f.changed
    );
    assert!(verdict("replay stability", ok, start.elapsed(), &detail));
}

#[test]
fn expansion_restores_free_capacity() {
    let start = Instant::now();
    let cases = 2000;
    let bad = expansion_arithmetic(0, cases).unwrap();
    let detail = match bad.first() {
        None => format!("{cases} random (n, p, delta) cases exact"),
        Some(b) => format!("{} of {cases} cases wrong, first: {b}", bad.len()),
    };
    assert!(verdict(
        "expansion arithmetic",
        bad.is_empty(),
        start.elapsed(),
        &detail
    ));
}

#[test]
fn regularizer_is_bounded_and_matches_hand_case() {
    let start = Instant::now();
    let bad = regularizer_bounds(0, 1000).unwrap();
    let detail = match bad.first() {
        None => "1000 random pairs in [0, 1], hand case 1/3".to_string(),
        Some(b) => format!("{} failures, first: {b}", bad.len()),
    };
    assert!(verdict(
        "regularizer",
        bad.is_empty(),
        start.elapsed(),
        &detail
    ));
}

#[test]
fn annealing_hits_its_endpoints() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for case in 0..500 {
        let s_max = rng.random_range(1.5..800.0);
        let epochs = rng.random_range(2..40);
        let batches = rng.random_range(2..200);
        let variant = if case % 2 == 0 {
            MaskVariant::Dgma
        } else {
            MaskVariant::Dgmw
        };
        let a = AnnealSchedule::new(s_max, epochs, batches, variant).unwrap();
        worst = worst
            .max((a.epoch_scale(1).unwrap() - 1.0 / s_max).abs())
            .max((a.epoch_scale(epochs).unwrap() - s_max).abs());
        for i in 1..=epochs {
            let si = a.epoch_scale(i).unwrap();
            let (first, last) = (a.scale_at(i, 1).unwrap(), a.scale_at(i, batches).unwrap());
            let want_first = match variant {
                MaskVariant::Dgma => si,
                MaskVariant::Dgmw => 1.0 / si,
            };
            worst = worst.max((first - want_first).abs()).max((last - si).abs());
        }
    }
    let detail = format!("500 schedules, worst endpoint error {worst:.2e}");
    assert!(verdict(
        "annealing endpoints",
        worst <= 1e-12,
        start.elapsed(),
        &detail
    ));
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let start = Instant::now();
    let w = gradient_check(0, 100).unwrap();
    let ok = w.trials >= 100 && w.error <= GRAD_TOLERANCE;
    let detail = format!(
        "{} trials over both networks, worst relative error {:.2e} ({}), {} draws near a kink redrawn",
        w.trials, w.error, w.what, w.redrawn
    );
    assert!(verdict("gradient oracle", ok, start.elapsed(), &detail));
}

#[test]
fn replay_prevents_forgetting_on_the_toy_stream() {
    let start = Instant::now();
    let with = run(&config("toy.toml", &[]));
    let without = run(&config("toy.toml", &["replay.enabled=false"]));
    let el = start.elapsed();
    let final_acc = with.final_accuracy().unwrap();
    let first = without.task_accuracy(1, 1).unwrap();
    let last = without.task_accuracy(5, 1).unwrap();
    let ok = final_acc >= 0.90 && last <= 0.30 * first && el < Duration::from_secs(600);
    let detail = format!(
        "replay A_5 = {final_acc:.4}; no replay task-1 accuracy {first:.4} -> {last:.4} (bound {:.4})",
        0.30 * first
    );
    assert!(verdict("forgetting ablation", ok, el, &detail));
}

#[test]
fn expansion_matters_for_an_undersized_generator() {
    let start = Instant::now();
    let base = [
        "model.g_hidden=[8,8]",
        "schedule.epochs=20",
        "losses.lambda_ru=1",
    ];
    let grown = run(&config("toy.toml", &base));
    let mut fixed = base.to_vec();
    fixed.push("expansion.enabled=false");
    let fixed = run(&config("toy.toml", &fixed));
    let (a, b) = (
        grown.final_accuracy().unwrap(),
        fixed.final_accuracy().unwrap(),
    );
    let gap = 100.0 * (a - b);
    let detail = format!("A_5 with expansion {a:.4}, without {b:.4}, gap {gap:.1} points");
    assert!(verdict(
        "no-expansion ablation",
        gap >= 10.0,
        start.elapsed(),
        &detail
    ));
}

#[test]
fn network_grows_and_reservations_shrink() {
    let start = Instant::now();
    let cfg = config(
        "toy.toml",
        &[
            "model.variant=dgma",
            "model.g_hidden=[64,64]",
            "schedule.epochs_growth=1.5",
        ],
    );
    let ledger = run(&cfg);
    let sizes = ledger.sizes();
    let deltas = ledger.deltas();
    let grows = sizes.windows(2).all(|w| w[0] <= w[1]);
    let tail = &deltas[deltas.len().saturating_sub(3)..];
    let shrinks = deltas.len() == 5 && tail.windows(2).all(|w| w[0] >= w[1]);
    let detail = format!("sizes {}; delta_t {}", fmt_list(&sizes), fmt_list(&deltas));
    assert!(verdict(
        "growth monotonicity",
        grows && shrinks,
        start.elapsed(),
        &detail
    ));
}

struct DigitRuns {
    replay: MetricsLedger,
    no_replay: MetricsLedger,
    joint: f64,
    task_classes: Vec<Vec<usize>>,
    elapsed: Duration,
}

fn digit_config(overrides: &[&str]) -> RunConfig {
    let mut cfg = config("mnist.toml", overrides);
    if std::env::var_os(DATA_DIR_ENV).is_none() {
        cfg.data.path = workspace()
            .join("data/mnist")
            .to_string_lossy()
            .into_owned();
    }
    cfg
}

fn ensure_digits(cfg: &RunConfig) {
    let dir = dgm_core::trainer::data_dir(cfg);
    if dir.join("train-images-idx3-ubyte").is_file() {
        return;
    }
    let status = std::process::Command::new("python3")
        .arg(workspace().join("scripts/prepare_mnist.py"))
        .arg(&dir)
        .status();
    assert!(
        matches!(status, Ok(s) if s.success()),
        "digit data missing at {} and could not be fetched",
        dir.display()
    );
}

fn digit_runs() -> &'static DigitRuns {
    static RUNS: OnceLock<DigitRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let cfg = digit_config(&[]);
        ensure_digits(&cfg);
        let start = Instant::now();
        let loaded = build_stream(&cfg).expect("digit stream builds");
        let replay = run_stream(cfg.clone(), &loaded, None)
            .expect("replay run")
            .ledger;
        let off = digit_config(&["replay.enabled=false"]);
        let no_replay = run_stream(off, &loaded, None)
            .expect("no-replay run")
            .ledger;
        let joint = joint_train_baseline(cfg, &loaded, None)
            .expect("joint run")
            .ledger
            .final_accuracy()
            .unwrap();
        DigitRuns {
            task_classes: replay.task_classes.clone(),
            replay,
            no_replay,
            joint,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn split_digits_at_desk_scale() {
    let r = digit_runs();
    let a = r.replay.final_accuracy().unwrap();
    let off = r.no_replay.final_accuracy().unwrap();
    let ok = a >= 0.75 && off <= 0.25 && r.joint > a && r.elapsed <= Duration::from_secs(3600);
    let detail = format!(
        "A_10 replay {a:.4}, no replay {off:.4}, joint {:.4}",
        r.joint
    );
    assert!(verdict("split-digit stream", ok, r.elapsed, &detail));
}

#[test]
fn forgetting_errors_land_on_the_current_task() {
    let r = digit_runs();
    let mut shares = Vec::new();
    let mut ok = true;
    for e in &r.no_replay.evaluations {
        let current = &r.task_classes[e.task - 1];
        match e.misclassified_share(current) {
            Some(s) => {
                ok &= s >= 0.70;
                shares.push(format!("{s:.3}"));
            }
            None => shares.push("-".into()),
        }
    }
    let detail = format!(
        "current-task share of errors per checkpoint: {}",
        shares.join(" ")
    );
    assert!(verdict("confusion structure", ok, r.elapsed, &detail));
}
