use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moe_sparsekit::calibrate::CalibrationTable;
use moe_sparsekit::model::load_weights;
use moe_sparsekit::profiler::parse_report;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_moe-sparsekit"));
    c.env_remove("MOE_SPARSEKIT_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small model with a shared expert, written into `dir`.
fn gen_model(dir: &TempDir, name: &str, seed: &str) -> PathBuf {
    let out = dir.path().join(name);
    let o = run(&[
        "gen", "--experts", "6", "--topk", "2", "--dmodel", "16", "--dffn", "64", "--shared-dim", "32", "--seed", seed,
        "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn line_value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no line starting with {key:?} in\n{text}"))
        .trim()
}

#[test]
fn gen_is_loadable_and_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = gen_model(&dir, "a.bin", "7");
    let b = gen_model(&dir, "b.bin", "7");
    let w = load_weights(&a).unwrap();
    assert_eq!((w.config.n_experts, w.config.top_k, w.config.d_shared), (6, 2, 32));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn gen_rejects_topk_above_experts() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("w.bin");
    let o = run(&["gen", "--experts", "2", "--topk", "3", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn calibrate_default_targets_and_determinism() {
    let dir = TempDir::new().unwrap();
    let w = gen_model(&dir, "w.bin", "1");
    let t1 = dir.path().join("t1.txt");
    let t2 = dir.path().join("t2.txt");
    for t in [&t1, &t2] {
        let o = run(&["calibrate", "--weights", p(&w), "--tokens", "128", "--seed", "3", "--out", p(t)]);
        assert_eq!(code(&o), 0);
        assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("0.")).count(), 5);
    }
    assert_eq!(std::fs::read(&t1).unwrap(), std::fs::read(&t2).unwrap());
    let table = CalibrationTable::load(&t1).unwrap();
    let targets: Vec<f32> = table.entries().iter().map(|e| e.target).collect();
    assert_eq!(targets, vec![0.60, 0.70, 0.80, 0.85, 0.87]);
    assert!(table.entries().windows(2).all(|e| e[0].threshold <= e[1].threshold));
}

#[test]
fn calibrate_rejects_duplicates_and_missing_weights() {
    let dir = TempDir::new().unwrap();
    let w = gen_model(&dir, "w.bin", "1");
    let out = dir.path().join("t.txt");
    assert_eq!(code(&run(&["calibrate", "--weights", p(&w), "--targets", "0.6,0.7,0.6", "--out", p(&out)])), 2);
    let missing = dir.path().join("missing.bin");
    assert_eq!(code(&run(&["calibrate", "--weights", p(&missing), "--out", p(&out)])), 2);
}

#[test]
fn malformed_weight_file_is_format_error() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"MOE1\x01").unwrap();
    let o = run(&["run", "--weights", p(&bad), "--dense"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("offset"));
}

#[test]
fn run_zero_sparsity_matches_dense() {
    let dir = TempDir::new().unwrap();
    let w = gen_model(&dir, "w.bin", "2");
    let sparse_out = dir.path().join("s.tsv");
    let dense_out = dir.path().join("d.tsv");
    let o = run(&["run", "--weights", p(&w), "--batch", "9", "--sparsity", "0", "--dump-output", p(&sparse_out)]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert_eq!(line_value(&text, "path_used:"), "sparse");
    let diff: f64 = line_value(&text, "max_rel_diff_vs_dense:").parse().unwrap();
    assert!(diff <= 1e-5);
    let o = run(&["run", "--weights", p(&w), "--batch", "9", "--dense", "--dump-output", p(&dense_out)]);
    assert_eq!(code(&o), 0);

    let parse = |path: &Path| -> Vec<f64> {
        std::fs::read_to_string(path)
            .unwrap()
            .split_whitespace()
            .map(|v| v.parse().unwrap())
            .collect()
    };
    let (s, d) = (parse(&sparse_out), parse(&dense_out));
    assert_eq!(s.len(), 9 * 16);
    let scale = d.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    assert!(s.iter().zip(&d).all(|(a, b)| (a - b).abs() <= 1e-5 * scale));
}

#[test]
fn run_rejects_dense_with_sparsity() {
    let dir = TempDir::new().unwrap();
    let w = gen_model(&dir, "w.bin", "2");
    assert_eq!(code(&run(&["run", "--weights", p(&w), "--dense", "--sparsity", "0.5"])), 2);
    assert_eq!(code(&run(&["run", "--weights", p(&w)])), 2);
}

#[test]
fn run_budget_reports_group_counts() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("w.bin");
    let o = run(&["gen", "--experts", "8", "--topk", "6", "--dmodel", "8", "--dffn", "32", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let o = run(&["run", "--weights", p(&out), "--batch", "4", "--sparsity", "0.5", "--budget", "3:2:1"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert_eq!(line_value(&text, "path_used:"), "masked-dense");
    // K = 6: two slots per group and 96 active neurons per token.
    assert_eq!(line_value(&text, "budget group g0:"), "slots=8 kept=192 per_slot=24.00");
    assert_eq!(line_value(&text, "budget group g1:"), "slots=8 kept=128 per_slot=16.00");
    assert_eq!(line_value(&text, "budget group g2:"), "slots=8 kept=64 per_slot=8.00");
}

#[test]
fn run_switch_prints_path_per_step() {
    let dir = TempDir::new().unwrap();
    let w = gen_model(&dir, "w.bin", "4");
    let o = run(&["run", "--weights", p(&w), "--tau", "0.5", "--switch", "--tipping", "8", "--batch", "1,4,8,32"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let paths: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("step "))
        .map(|l| l.split_whitespace().find_map(|t| t.strip_prefix("path_used=")).unwrap())
        .collect();
    assert_eq!(paths, ["sparse", "sparse", "dense", "dense"]);
}

#[test]
fn sweep_emits_rows_and_cutoff() {
    let dir = TempDir::new().unwrap();
    let w = gen_model(&dir, "w.bin", "5");
    let csv = dir.path().join("s.csv");
    let o = run(&["sweep", "--weights", p(&w), "--tokens", "32", "--targets", "0,0.3,0.6,0.9", "--out", p(&csv)]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let (points, cutoff) = parse_report(&text).unwrap();
    assert_eq!(points.len(), 4);
    assert!(text.lines().last().unwrap().starts_with("# cutoff="));
    assert!(cutoff.is_some());

    let o = run(&["sweep", "--weights", p(&w), "--tokens", "32", "--targets", "0,0.3,0.6,0.9"]);
    assert_eq!(stdout(&o), text);
}

#[test]
fn profile_histogram_sums_to_events() {
    let dir = TempDir::new().unwrap();
    let w = gen_model(&dir, "w.bin", "6");
    let hist = dir.path().join("h.txt");
    let o = run(&["profile", "--weights", p(&w), "--expert", "0", "--tokens", "100", "--out", p(&hist)]);
    assert_eq!(code(&o), 0);
    let total: u64 = std::fs::read_to_string(&hist)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 100 * 64);
    assert!(stdout(&o).contains("events=6400"));
}

#[test]
fn bench_reports_exact_counter_ratios() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("w.bin");
    let o = run(&["gen", "--experts", "4", "--topk", "2", "--dmodel", "16", "--dffn", "512", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let o = run(&["bench", "--weights", p(&out), "--batch", "8", "--calib-tokens", "256", "--reps", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(line_value(&text, "up/down reduction (ideal at target):"), "16.6667x");
    let unpadded: f64 = line_value(&text, "up/down reduction (unpadded):").trim_end_matches('x').parse().unwrap();
    assert!((12.0..24.0).contains(&unpadded), "{unpadded}");
    assert!(text.contains("(informational)"));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = TempDir::new().unwrap();
    let w = gen_model(&dir, "w.bin", "8");
    let one = dir.path().join("1.tsv");
    let four = dir.path().join("4.tsv");
    let args = |out: &Path| -> Vec<String> {
        ["run", "--weights", p(&w), "--batch", "33", "--tau", "0.3", "--dump-output", p(out)]
            .map(String::from)
            .to_vec()
    };
    assert_eq!(code(&bin().args(args(&one)).output().unwrap()), 0);
    let o = bin().args(args(&four)).env("MOE_SPARSEKIT_THREADS", "4").output().unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&one).unwrap(), std::fs::read(&four).unwrap());
}
