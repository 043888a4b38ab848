//! End-to-end CLI behavior: subcommands, file outputs, exit codes
//! (0 success, 1 usage error, 2 data error, 3 numeric failure).

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sstx"))
}

fn line_count(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn unknown_flag_exits_one_with_usage() {
    let out = bin()
        .args(["train", "--definitely-not-a-flag"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("usage"), "stderr: {}", err);
}

#[test]
fn unknown_subcommand_exits_one() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_task_writes_corpus_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "gen-task",
            "--kind",
            "copy",
            "--vocab",
            "16",
            "--n-train",
            "120",
            "--n-dev",
            "15",
            "--n-test",
            "15",
            "--seed",
            "3",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(line_count(&dir.path().join("train.src")), 120);
    assert_eq!(line_count(&dir.path().join("train.tgt")), 120);
    assert_eq!(line_count(&dir.path().join("dev.src")), 15);
    assert_eq!(line_count(&dir.path().join("test.tgt")), 15);
    // copy task: source and target lines are identical
    assert_eq!(
        std::fs::read_to_string(dir.path().join("train.src")).unwrap(),
        std::fs::read_to_string(dir.path().join("train.tgt")).unwrap()
    );
}

#[test]
fn gen_task_rejects_infeasible_request() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "gen-task",
            "--kind",
            "copy",
            "--vocab",
            "5",
            "--min-len",
            "1",
            "--max-len",
            "1",
            "--n-train",
            "2000",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_missing_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "evaluate",
            "--checkpoint",
            dir.path().join("nope.sstx").to_str().unwrap(),
            "--src",
            "missing.src",
            "--ref",
            "missing.tgt",
            "--config",
            dir.path().join("nope.toml").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    // the config is unreadable -> config/usage error
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_config_value_exits_one() {
    let out = bin()
        .args([
            "train",
            "--set",
            "mix.kind=bogus",
            "--out",
            "/tmp/should_not_matter",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_evaluate_decode_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    // a deliberately tiny run; wiring is what matters here
    let out = bin()
        .args([
            "train",
            "--seed",
            "2",
            "--out",
            run_dir.to_str().unwrap(),
            "--set",
            "task.n_train=200",
            "--set",
            "task.n_dev=20",
            "--set",
            "task.n_test=20",
            "--set",
            "task.min_len=3",
            "--set",
            "task.max_len=6",
            "--set",
            "train.max_steps=20",
            "--set",
            "train.validation_interval=10",
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for file in [
        "metrics.csv",
        "best.sstx",
        "last.sstx",
        "config.toml",
        "vocab.src.txt",
        "vocab.tgt.txt",
        "report.txt",
    ] {
        assert!(run_dir.join(file).exists(), "missing {}", file);
    }

    // corpus to evaluate/decode against
    let data_dir = dir.path().join("data");
    let status = bin()
        .args([
            "gen-task",
            "--kind",
            "copy",
            "--vocab",
            "16",
            "--min-len",
            "3",
            "--max-len",
            "6",
            "--n-train",
            "30",
            "--n-dev",
            "10",
            "--n-test",
            "10",
            "--seed",
            "8",
            "--out",
            data_dir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let out = bin()
        .args([
            "evaluate",
            "--checkpoint",
            run_dir.join("best.sstx").to_str().unwrap(),
            "--src",
            data_dir.join("dev.src").to_str().unwrap(),
            "--ref",
            data_dir.join("dev.tgt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("loss=") && text.contains("bleu="),
        "stdout: {}",
        text
    );

    let hyp_path = dir.path().join("hyp.txt");
    let out = bin()
        .args([
            "decode",
            "--checkpoint",
            run_dir.join("best.sstx").to_str().unwrap(),
            "--src",
            data_dir.join("dev.src").to_str().unwrap(),
            "--out",
            hyp_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(line_count(&hyp_path), 10);
}

#[test]
fn train_on_files_via_gen_task() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let status = bin()
        .args([
            "gen-task",
            "--kind",
            "reverse",
            "--vocab",
            "10",
            "--min-len",
            "3",
            "--max-len",
            "5",
            "--n-train",
            "100",
            "--n-dev",
            "10",
            "--n-test",
            "10",
            "--seed",
            "4",
            "--out",
            data_dir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let run_dir = dir.path().join("run");
    let out = bin()
        .args([
            "train",
            "--seed",
            "3",
            "--out",
            run_dir.to_str().unwrap(),
            "--set",
            "task.kind=files",
            "--set",
            &format!("data.train_src={}", data_dir.join("train.src").display()),
            "--set",
            &format!("data.train_tgt={}", data_dir.join("train.tgt").display()),
            "--set",
            &format!("data.dev_src={}", data_dir.join("dev.src").display()),
            "--set",
            &format!("data.dev_tgt={}", data_dir.join("dev.tgt").display()),
            "--set",
            &format!("data.test_src={}", data_dir.join("test.src").display()),
            "--set",
            &format!("data.test_tgt={}", data_dir.join("test.tgt").display()),
            "--set",
            "train.max_steps=10",
            "--set",
            "train.validation_interval=5",
            "--set",
            "mode=baseline",
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(line_count(&run_dir.join("metrics.csv")), 1 + 3);
}

#[test]
fn grad_check_subcommand_passes() {
    let out = bin().args(["grad-check", "--seeds", "3"]).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("matmul") && text.contains("ok"),
        "stdout: {}",
        text
    );
}

#[test]
fn resume_flag_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let base_args = |max: &str| {
        vec![
            "train".to_string(),
            "--seed".to_string(),
            "6".to_string(),
            "--out".to_string(),
            run_dir.to_str().unwrap().to_string(),
            "--set".to_string(),
            "task.n_train=200".to_string(),
            "--set".to_string(),
            "task.n_dev=20".to_string(),
            "--set".to_string(),
            "task.n_test=20".to_string(),
            "--set".to_string(),
            format!("train.max_steps={}", max),
            "--set".to_string(),
            "train.validation_interval=10".to_string(),
        ]
    };
    let out = bin().args(base_args("10")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let mut resumed = base_args("20");
    resumed.push("--resume".to_string());
    resumed.push(run_dir.join("last.sstx").to_str().unwrap().to_string());
    let out = bin().args(resumed).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("steps_run=20"), "stdout: {}", text);
}
