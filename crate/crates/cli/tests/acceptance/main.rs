//! Acceptance suite. Each test checks one criterion and prints a single
//! `PASS` / `FAIL` line with the measured values; tests run one at a time
//! so the runtime budgets measure a quiet machine.

mod gradient;
mod identity;
mod oracle;

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use apcnn_core::ablation::{run_rows, suite_rows, AblationResult, Suite};
use apcnn_core::data::gen_synthetic;
use apcnn_core::refine::select_level;
use apcnn_core::{ModelConfig, Rng, SyntheticConfig, TrainConfig};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written straight to stdout so the line shows even when the harness
/// captures test output.
fn report(criterion: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(io::stdout().lock(), "{verdict} {criterion}: {detail}");
}

#[test]
fn gradient_suite() {
    let _guard = serial();
    let start = Instant::now();
    let ops = gradient::op_reports().expect("op gradient checks run");
    let model = gradient::model_report().expect("model gradient check runs");
    let elapsed = start.elapsed();
    let worst_op = ops
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .expect("ops checked");
    for (name, r) in &ops {
        println!("  {name:<16} max rel error {:.2e}", r.max_rel_error);
    }
    let passed = ops.iter().all(|(_, r)| r.max_rel_error < gradient::OP_TOL)
        && model.max_rel_error < gradient::MODEL_TOL
        && elapsed < Duration::from_secs(120);
    report(
        "gradient suite",
        passed,
        &format!(
            "{} ops x {} instances, worst op {} at {:.2e} (< {:.0e}); end-to-end {:.2e} (< {:.0e}) over {} instances; {:.1}s (< 120s)",
            ops.len(),
            gradient::INSTANCES,
            worst_op.0,
            worst_op.1.max_rel_error,
            gradient::OP_TOL,
            model.max_rel_error,
            gradient::MODEL_TOL,
            gradient::INSTANCES,
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn oracle_suite() {
    let _guard = serial();
    let start = Instant::now();
    let results = oracle::reports().expect("oracle checks run");
    let elapsed = start.elapsed();
    for r in &results {
        println!(
            "  {:<18} {} instances, max error {:.2e} (tolerance {:.0e})",
            r.name, r.instances, r.max_error, r.tolerance
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let passed = failed.is_empty() && elapsed < Duration::from_secs(60);
    report(
        "oracle suite",
        passed,
        &format!(
            "{} oracles x {} instances, failing: {:?}; {:.1}s (< 60s)",
            results.len(),
            oracle::INSTANCES,
            failed,
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn identity_suite() {
    let _guard = serial();
    let checks = [
        ("A_s = A_c = 0.5 keeps F", identity::half_masks_pass_features().unwrap()),
        ("all-ones mask keeps B", identity::all_ones_mask_is_identity().unwrap()),
        ("full-extent zoom keeps D", identity::full_extent_zoom_is_identity().unwrap()),
        ("P = 0 never drops", identity::zero_probabilities_never_drop()),
        ("single-level pyramid", identity::single_level_pyramid_degenerates().unwrap()),
        ("eval-mode determinism", identity::eval_forward_is_deterministic().unwrap()),
    ];
    for (name, ok) in &checks {
        println!("  {name:<28} {}", if *ok { "exact" } else { "MISMATCH" });
    }
    let passed = checks.iter().all(|c| c.1);
    report("identity suite", passed, &format!("{} exact identities", checks.len()));
    assert!(passed);
}

#[test]
fn stochastic_calibration() {
    let _guard = serial();
    let probs = [0.3, 0.3, 0.0];
    let draws = 100_000;
    let mut rng = Rng::new(2024);
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        if let Some(k) = select_level(&probs, &mut rng) {
            counts[k] += 1;
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let passed = freqs.iter().zip(probs).all(|(f, p)| (f - p).abs() <= 0.01);
    report(
        "stochastic calibration",
        passed,
        &format!("{draws} draws, frequencies {freqs:.4?} vs {probs:?} (+-0.01)"),
    );
    assert!(passed);
}

pub const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

/// Training setup shared by the directional and localization criteria.
pub fn ablation_setup() -> (ModelConfig, TrainConfig, SyntheticConfig) {
    let train = TrainConfig {
        epochs: 30,
        lr0: 0.003,
        ..TrainConfig::default()
    };
    (ModelConfig::default(), train, SyntheticConfig::default())
}

struct AblationRun {
    results: Vec<AblationResult>,
    elapsed: Duration,
}

/// The four directional rows, trained once and shared with localization.
fn ablation() -> &'static AblationRun {
    static RUN: OnceLock<AblationRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let (model, train, data) = ablation_setup();
        let all = gen_synthetic(&data, &mut Rng::new(0)).expect("synthetic data");
        let (train_set, test_set) = all.split_off_test(data.images_per_class / 5);
        let rows = suite_rows(Suite::Directional, &model);
        let start = Instant::now();
        let results = run_rows(&rows, &train, &train_set, &test_set, &ABLATION_SEEDS, |label, seed, acc| {
            println!("  {label} seed {seed}: test accuracy {:.2}%", 100.0 * acc);
        })
        .expect("ablation runs");
        AblationRun {
            results,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn directional_ablation() {
    let _guard = serial();
    let run = ablation();
    let acc: Vec<f64> = run.results.iter().map(|r| 100.0 * r.mean_accuracy).collect();
    let labels: Vec<&str> = run.results.iter().map(|r| r.label.as_str()).collect();
    let ordered = acc.windows(2).all(|w| w[0] <= w[1]);
    let gain = acc[3] - acc[0];
    let in_budget = run.elapsed < Duration::from_secs(30 * 60);
    let passed = ordered && gain >= 3.0 && in_budget;
    let table: Vec<String> = labels.iter().zip(&acc).map(|(l, a)| format!("{l} {a:.2}")).collect();
    report(
        "directional ablation",
        passed,
        &format!(
            "mean test accuracy over seeds {ABLATION_SEEDS:?}: [{}]; monotone: {ordered}; full - baseline = {gain:+.2} points (>= +3); {:.0}s (< 1800s)",
            table.join(", "),
            run.elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn localization() {
    let _guard = serial();
    let run = ablation();
    let full = run.results.last().expect("full model row");
    let loc = full.localization.expect("full model has ROIs");
    let passed = loc.recall >= 0.6 && loc.miou >= 0.4;
    report(
        "localization",
        passed,
        &format!(
            "{} over seeds {ABLATION_SEEDS:?}: recall@0.5 {:.3} (>= 0.6), mIoU {:.3} (>= 0.4), {} images scored, {} skipped",
            full.label, loc.recall, loc.miou, loc.evaluated, loc.skipped
        ),
    );
    assert!(passed);
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("readable run dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("under run dir").display().to_string();
                out.push((rel, fs::read(&path).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn determinism() {
    let _guard = serial();
    let tmp = tempfile::tempdir().expect("temp dir");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_apcnn"))
            .args(["train", "--quiet", "--epochs", "2", "--images-per-class", "12", "--test-per-class", "4", "--seed", "7"])
            .args(["--num-classes", "4", "--input-size", "64", "--fpn-channels", "32"])
            .arg("--out")
            .arg(&out)
            .env_remove("APCNN_SEED")
            .output()
            .expect("apcnn runs");
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        tree_bytes(&out)
    };
    let (a, b) = (run("a"), run("b"));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let has_checkpoint = names.iter().any(|n| n.ends_with(".aptn"));
    let passed = a == b && names.contains(&"metrics.jsonl") && has_checkpoint;
    report(
        "determinism",
        passed,
        &format!("two `train` runs, {} files compared byte for byte (metrics.jsonl and checkpoints), identical: {}", a.len(), a == b),
    );
    assert!(passed);
}
