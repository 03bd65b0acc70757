use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": {"synthetic": {"vocab_size": 96, "num_topics": 2, "general_terms": 8, "terms_per_topic": 6,
    "docs_initial": 12, "docs_per_increment": 4, "increments": 2, "entities_per_doc": 3, "body_len": 12,
    "pseudo_per_doc": 3, "query_terms": [2, 4]}},
  "encoder": {"num_layers": 3, "dim": 16, "heads": 2, "ff_dim": 32, "max_len": 8, "vocab_size": 96},
  "plan": {"base_epochs": 3, "epochs": 1, "batch_size": 8, "refine_epochs": 1, "num_topics": 2,
    "pool": {"pool_size": 3, "prompt_len": 4, "coda_prompt_len": 2}}
}"#;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptdsi"))
        .args(args)
        .current_dir(cwd)
        .env("PROMPTDSI_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = bin(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn only_subdir(root: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

fn checkpoints(run: &Path) -> usize {
    fs::read_dir(run.join("checkpoints"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join("manifest.json").exists())
        .count()
}

#[test]
fn default_spec_run_has_matrix_utilization_and_six_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "data.jsonl"], d);
    ok(
        &[
            "continue",
            "--data",
            "data.jsonl",
            "--strategy",
            "PROMPTDSI_L2P",
            "--base-epochs",
            "1",
            "--epochs",
            "1",
            "--out",
            "runs",
        ],
        d,
    );
    let run = only_subdir(&d.join("runs"));
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("PROMPTDSI_L2P-"));
    for f in ["perf_matrix.csv", "utilization.csv", "trace.csv", "summary.json", "config.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert_eq!(checkpoints(&run), 6);
    let perf = fs::read_to_string(run.join("perf_matrix.csv")).unwrap();
    // 3 metrics × 21 lower-triangular cells + header
    assert_eq!(perf.lines().count(), 1 + 3 * 21);
}

#[test]
fn eval_reproduces_every_row_bit_for_bit() {
    let dir = tiny_dir();
    let d = dir.path();
    ok(&["continue", "--config", "tiny.json", "--out", "runs"], d);
    let run = only_subdir(&d.join("runs"));
    assert_eq!(checkpoints(&run), 3);
    for t in 0..3 {
        let ckpt = run.join("checkpoints").join(format!("t{t}"));
        let out = ok(&["eval", "--checkpoint", ckpt.to_str().unwrap()], d);
        assert!(out.contains(&format!("row {t} matches")), "{out}");
    }
}

#[test]
fn eval_flags_a_tampered_matrix() {
    let dir = tiny_dir();
    let d = dir.path();
    ok(&["continue", "--config", "tiny.json", "--out", "runs"], d);
    let run = only_subdir(&d.join("runs"));
    let path = run.join("perf_matrix.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let idx = lines.iter().position(|l| l.starts_with("hits@10,1,0,")).unwrap();
    lines[idx] = "hits@10,1,0,1.23450000000000000e-1".into();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let ckpt = run.join("checkpoints/t1");
    let out = bin(&["eval", "--checkpoint", ckpt.to_str().unwrap()], d);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn base_checkpoint_feeds_continue_and_runs_are_reproducible() {
    let dir = tiny_dir();
    let d = dir.path();
    ok(&["gen-data", "--config", "tiny.json", "--out", "data.jsonl.gz"], d);
    ok(
        &["train-base", "--config", "tiny.json", "--data", "data.jsonl.gz", "--out", "base"],
        d,
    );
    assert!(d.join("base/checkpoints/t0/manifest.json").exists());
    for root in ["a", "b"] {
        ok(
            &[
                "continue",
                "--config",
                "tiny.json",
                "--data",
                "data.jsonl.gz",
                "--base",
                "base/checkpoints/t0",
                "--strategy",
                "PROMPTDSI_CODA",
                "--out",
                root,
            ],
            d,
        );
    }
    let a = only_subdir(&d.join("a"));
    let b = only_subdir(&d.join("b"));
    assert_eq!(a.file_name(), b.file_name());
    assert_eq!(
        fs::read(a.join("perf_matrix.csv")).unwrap(),
        fs::read(b.join("perf_matrix.csv")).unwrap()
    );
    // the embedded config alone reproduces the run
    ok(
        &["continue", "--config", a.join("config.json").to_str().unwrap(), "--out", "c"],
        d,
    );
    let c = only_subdir(&d.join("c"));
    assert_eq!(
        fs::read(a.join("perf_matrix.csv")).unwrap(),
        fs::read(c.join("perf_matrix.csv")).unwrap()
    );
}

#[test]
fn bench_pass_reports_exact_invocation_ratio() {
    let dir = tiny_dir();
    let out = ok(&["bench-pass", "--config", "tiny.json", "--repeats", "1"], dir.path());
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["invocation_ratio"].as_f64(), Some(2.0));
    let single = v["single_pass"]["layer_invocations_per_pass"].as_u64().unwrap();
    // 12 D_0 test queries × 3 layers
    assert_eq!(single, 36);
}

#[test]
fn seed_sweep_and_report_write_tables() {
    let dir = tiny_dir();
    let d = dir.path();
    let out = ok(
        &[
            "seed-sweep",
            "--config",
            "tiny.json",
            "--seeds",
            "0,1",
            "--strategies",
            "FROZEN_CLS,PROMPTDSI_L2P",
            "--out",
            "sweep",
        ],
        d,
    );
    assert!(out.contains("2 seeds"), "{out}");
    let sweep = fs::read_to_string(d.join("sweep/sweep.csv")).unwrap();
    assert!(sweep.starts_with("strategy,quantity,mean,std\n"));
    assert!(sweep.contains("PROMPTDSI_L2P,average.hits@10,"));
    let table = fs::read_to_string(d.join("sweep/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);

    let runs: Vec<String> = fs::read_dir(d.join("sweep"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .map(|p| p.to_str().unwrap().to_string())
        .collect();
    assert_eq!(runs.len(), 4);
    let mut args = vec!["report", "--out", "rep"];
    args.extend(runs.iter().map(String::as_str));
    ok(&args, d);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("rep/table.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 4);
    assert!(json[0]["average"]["hits@10"].is_number());
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tiny_dir();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"plan": {"batch_size": 0}}"#).unwrap();
    fs::write(d.join("typo.json"), r#"{"sed": 3}"#).unwrap();
    fs::write(d.join("bad.jsonl"), "not json\n").unwrap();
    let code = |args: &[&str]| bin(args, d).status.code();
    assert_eq!(code(&["continue", "--config", "bad.json", "--out", "r"]), Some(2));
    assert_eq!(code(&["continue", "--config", "typo.json", "--out", "r"]), Some(2));
    assert_eq!(code(&["continue", "--config", "missing.json", "--out", "r"]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["continue", "--strategy", "NOPE", "--out", "r"]), Some(2));
    assert_eq!(
        code(&["continue", "--config", "tiny.json", "--data", "bad.jsonl", "--out", "r"]),
        Some(3)
    );
    assert_eq!(
        code(&["eval", "--checkpoint", "nowhere/checkpoints/t0", "--config", "tiny.json"]),
        Some(3)
    );
}
