use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use gradinv::victim::{load_bundle, load_truth, save_bundle, save_truth};
use gradinv::Tensor;
use tempfile::TempDir;

fn gradinv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradinv")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gradinv(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn victim(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec!["gen-victim", "--out", s(&path)];
    args.extend_from_slice(extra);
    ok(&args);
    path
}

#[test]
fn gen_victim_is_deterministic_and_loadable() {
    let dir = TempDir::new().unwrap();
    let a = victim(dir.path(), "a.ginv", &["--seed", "5", "--set", "k=3"]);
    let b = victim(dir.path(), "b.ginv", &["--seed", "5", "--set", "k=3"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let bundle = load_bundle(&a).unwrap();
    assert_eq!(bundle.batch_size, 3);
    assert_eq!(load_truth(&a.with_extension("truth")).unwrap().len(), 3);
}

#[test]
fn gen_victim_rejects_more_distinct_labels_than_classes() {
    let dir = TempDir::new().unwrap();
    let out = gradinv(&["gen-victim", "--out", s(&dir.path().join("v.ginv")), "--set", "k=11"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_names_the_line() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\nk = 2\nalpha_tvv = 1\n").unwrap();
    let out = gradinv(&["gen-victim", "--config", s(&cfg), "--out", s(&dir.path().join("v.ginv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn labels_prints_the_true_label_at_k1() {
    let dir = TempDir::new().unwrap();
    let v = victim(dir.path(), "v.ginv", &["--seed", "11"]);
    let truth = load_truth(&v.with_extension("truth")).unwrap();
    let stdout = ok(&["labels", s(&v), "--truth", s(&v.with_extension("truth"))]);
    let mut lines = stdout.lines();
    assert_eq!(lines.next().unwrap(), truth.labels[0].to_string());
    assert_eq!(lines.next().unwrap(), "accuracy 100.0%");
}

#[test]
fn labels_min_and_sum_can_disagree() {
    let dir = TempDir::new().unwrap();
    let v = victim(dir.path(), "v.ginv", &[]);
    let mut bundle = load_bundle(&v).unwrap();
    // class 0 has the single most negative entry, class 1 the most negative
    // column sum
    let idx = bundle.model.spec.classifier_weight_index();
    let n = bundle.grads[idx].shape()[1];
    bundle.grads[idx] = Tensor::from_fn(bundle.grads[idx].shape(), |i| match (i / n, i % n) {
        (0, 0) => -1.0,
        (1, 0) => 0.5,
        (0 | 1, 1) => -0.6,
        _ => 0.1,
    });
    save_bundle(&bundle, &v).unwrap();
    assert_eq!(ok(&["labels", s(&v), "-k", "1", "--rule", "min"]).trim(), "0");
    assert_eq!(ok(&["labels", s(&v), "-k", "1", "--rule", "sum"]).trim(), "1");
}

#[test]
fn missing_files_exit_with_code_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(gradinv(&["labels", s(&dir.path().join("none.ginv"))]).status.code(), Some(2));
    let v = victim(dir.path(), "v.ginv", &[]);
    let report = dir.path().join("r");
    ok(&["attack", s(&v), "--out", s(&report), "--set", "iterations=20", "--set", "warmup=2"]);
    let out = gradinv(&["eval", s(&report), "--truth", s(&dir.path().join("none.truth"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(gradinv(&["attack"]).status.code(), Some(2));
}

#[test]
fn attack_smoke_run_writes_a_full_report() {
    let dir = TempDir::new().unwrap();
    let v = victim(dir.path(), "v.ginv", &["--set", "k=2"]);
    let report = dir.path().join("report");
    let start = Instant::now();
    ok(&["attack", s(&v), "--out", s(&report), "--set", "iterations=50", "--set", "group_size=4"]);
    assert!(start.elapsed() < Duration::from_secs(60));
    for i in 0..4 {
        assert!(report.join(format!("seed_{i}.pgm")).exists());
        let csv = fs::read_to_string(report.join(format!("loss_seed_{i}.csv"))).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "t,lr,l_grad,tv,l2,bn,group,total");
        assert_eq!(csv.lines().count(), 51);
    }
    assert!(!report.join("seed_4.pgm").exists());
    for name in ["consensus.pgm", "config.txt", "bundle.ginv", "metrics.txt", "reconstruction.grec"] {
        assert!(report.join(name).exists(), "{name}");
    }
    assert_eq!(fs::read(report.join("bundle.ginv")).unwrap(), fs::read(&v).unwrap());
    // montage of two 16×16 images in one row
    let pgm = fs::read(report.join("consensus.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n33 16\n255\n"));
}

#[test]
fn rerun_without_noise_reproduces_the_loss_trace() {
    let dir = TempDir::new().unwrap();
    let v = victim(dir.path(), "v.ginv", &[]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["attack", s(&v), "--out", s(&out), "--seed", "3", "--set", "iterations=40", "--set", "alpha_noise=0"]);
        fs::read(out.join("loss_seed_0.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn divergence_exits_with_code_3() {
    let dir = TempDir::new().unwrap();
    let v = victim(dir.path(), "v.ginv", &[]);
    let out = gradinv(&[
        "attack",
        s(&v),
        "--out",
        s(&dir.path().join("r")),
        "--set",
        "lr=1e300",
        "--set",
        "iterations=20",
        "--set",
        "warmup=0",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

fn metric(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn eval_against_own_consensus_hits_the_psnr_cap() {
    let dir = TempDir::new().unwrap();
    let v = victim(dir.path(), "v.ginv", &["--set", "k=2"]);
    let report = dir.path().join("r");
    ok(&["attack", s(&v), "--out", s(&report), "--set", "iterations=30", "--set", "warmup=2"]);
    // the consensus clamped to [0, 1], with the restored labels, stands in
    // for the ground truth
    let bytes = fs::read(report.join("reconstruction.grec")).unwrap();
    let archive = gradinv::container::Archive::decode(&bytes, *b"GREC").unwrap();
    let consensus = gradinv::metrics::to_unit_range(archive.get("consensus").unwrap());
    let labels = archive.get("labels").unwrap().data().iter().map(|&l| l as usize).collect();
    let fake = dir.path().join("fake.truth");
    save_truth(&gradinv::data::Batch::new(consensus, labels).unwrap(), &fake).unwrap();
    let text = ok(&["eval", s(&report), "--truth", s(&fake)]);
    assert_eq!(metric(&text, "psnr_mean_db"), 99.0);
    assert!(metric(&text, "fft2d_mean").abs() < 1e-12);
    assert_eq!(fs::read_to_string(report.join("metrics.txt")).unwrap(), text);
}

#[test]
fn eval_of_the_noise_start_is_far_from_the_truth() {
    let dir = TempDir::new().unwrap();
    let v = victim(dir.path(), "v.ginv", &[]);
    let report = dir.path().join("r");
    // zero step size leaves the candidate at its Gaussian starting point
    ok(&["attack", s(&v), "--out", s(&report), "--set", "iterations=5", "--set", "warmup=0", "--set", "lr=0", "--set", "alpha_noise=0"]);
    let text = ok(&["eval", s(&report), "--truth", s(&v.with_extension("truth"))]);
    assert!(metric(&text, "fft2d_mean") > 0.3, "{text}");
    assert!(metric(&text, "psnr_mean_db") < 10.0, "{text}");
}
