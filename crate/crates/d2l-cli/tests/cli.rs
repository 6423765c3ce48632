//! End-to-end tests of the `d2l` binary: exit codes, the full pipeline over
//! a miniature config, and override plumbing.

use std::path::Path;
use std::process::{Command, Output};

fn d2l(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2l"))
        .args(args)
        .current_dir(dir)
        .env_remove("D2L_RUN_DIR")
        .output()
        .expect("binary runs")
}

fn tiny_sets(out_dir: &str) -> Vec<String> {
    [
        ("out_dir", out_dir),
        ("run_name", "mini"),
        ("pretrain.steps", "4"),
        ("pretrain.corpus.n_docs", "24"),
        ("pretrain.corpus.len_range", "[33,96]"),
        ("pretrain.buffer_len", "64"),
        ("pretrain.batch_size", "2"),
        ("pretrain.warmup_steps", "1"),
        ("data.n_contexts", "3"),
        ("data.length_range", "[40,80]"),
        ("data.max_new", "4"),
        ("schedule.stage1_steps", "2"),
        ("schedule.stage2_steps", "1"),
        ("schedule.batch_token_budget", "96"),
        ("cd.steps", "2"),
        ("cd.n_queries", "2"),
        ("cd.eval_instances", "1"),
        ("cd.max_new", "4"),
        ("eval.lengths", "[64]"),
        ("eval.n_instances", "2"),
        ("eval.latency_repeats", "1"),
    ]
    .iter()
    .flat_map(|(k, v)| ["--set".to_string(), format!("{k}={v}")])
    .collect()
}

fn run_tiny(dir: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd.to_string()];
    args.extend(tiny_sets("out"));
    args.extend(extra.iter().map(|s| s.to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    d2l(dir, &args)
}

#[test]
fn usage_and_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // No subcommand → clap usage error, exit 2.
    let out = d2l(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));

    // Unknown config key → validation error naming the key, exit 2.
    let out = d2l(dir.path(), &["pretrain-lm", "--set", "lm.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus"), "stderr: {stderr}");

    // Invalid config value → exit 2.
    let out = d2l(dir.path(), &["pretrain-lm", "--set", "lm.d_model=0"]);
    assert_eq!(out.status.code(), Some(2));

    // Missing input artifact → exit 2 with a pointer to the producer.
    let out = run_tiny(dir.path(), "gen-data", &[]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("pretrain-lm"), "stderr: {stderr}");

    // Malformed --set syntax → clap error, exit 2.
    let out = d2l(dir.path(), &["eval", "--set", "no_equals_sign"]);
    assert_eq!(out.status.code(), Some(2));

    // Report over a nonexistent run → exit 2.
    let out = d2l(dir.path(), &["report", "does-not-exist"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();

    let out = run_tiny(dir.path(), "pretrain-lm", &[]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("JSON summary on stdout");
    assert_eq!(summary["steps"], 4);

    let run_dir = dir.path().join("out/mini");
    assert!(run_dir.join("lm.d2lc").exists());
    assert!(run_dir.join("config.json").exists());

    let out = run_tiny(dir.path(), "gen-data", &[]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("meta_dataset.jsonl").exists());

    let out = run_tiny(dir.path(), "meta-train", &[]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("hypernet.d2lc").exists());

    // Prefix twin for the hyperkv method.
    let out = run_tiny(
        dir.path(),
        "meta-train",
        &["--set", "hypernet.output_mode=prefix_kv", "--set", "hypernet.n_latents=20"],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("hyperkv.d2lc").exists());

    let out = run_tiny(dir.path(), "eval", &[]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("schema_version,1\n"), "{metrics}");
    for method in
        ["in_context", "hypernet-batched", "hypernet-iterative", "cd-oracle", "cd-generated-q", "hyperkv"]
    {
        assert!(metrics.contains(method), "missing {method} in:\n{metrics}");
    }

    let out = d2l(dir.path(), &["report", "out/mini", "--out", "rep"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("rep/report.csv").exists());
    assert!(dir.path().join("rep/accuracy_vs_length.csv").exists());
}

#[test]
fn runtime_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny(dir.path(), "pretrain-lm", &[]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let out = run_tiny(dir.path(), "gen-data", &[]);
    assert_eq!(out.status.code(), Some(0));

    // An absurd learning rate passes validation but diverges at runtime.
    let out = run_tiny(dir.path(), "meta-train", &["--set", "schedule.lr=1e8"]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("diverged"), "stderr: {stderr}");
}
