use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dualspeech"));
    c.env("RUST_LOG", "warn");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn corpus(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let spec = fixture("tiny_spec.toml");
    ok(&["gen-synthetic", "--out", data.to_str().unwrap(), "--spec", spec.to_str().unwrap()]);
    data
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_error_exits_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn malformed_manifest_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "fit-codebook",
        "--manifest",
        s(&fixture("broken.jsonl")),
        "--out",
        s(&tmp.path().join("cb.bin")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error[parse]"), "{err}");
    assert!(err.contains("broken.jsonl:2:"), "{err}");
}

#[test]
fn missing_checkpoint_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path());
    let out = run(&[
        "eval-s2t",
        "--checkpoint",
        s(&tmp.path().join("nope.ckpt")),
        "--manifest",
        s(&data.join("s2t_test.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]"));
}

#[test]
fn train_zero_steps_writes_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path());
    let run_dir = tmp.path().join("run");
    let stdout = ok(&[
        "--config",
        s(&fixture("tiny.toml")),
        "train",
        "--s2t-train",
        s(&data.join("s2t_train.jsonl")),
        "--out",
        s(&run_dir),
        "--steps",
        "0",
    ]);
    assert!(stdout.contains("step 0"), "{stdout}");
    assert!(run_dir.join("checkpoint.ckpt").exists());
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert!(metrics.is_empty());
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path());
    let cfg = fixture("tiny.toml");
    let cb = tmp.path().join("codebook.bin");
    let train = data.join("s2t_train.jsonl");
    let test = data.join("s2t_test.jsonl");

    let fit = ok(&["--config", s(&cfg), "fit-codebook", "--manifest", s(&train), "--out", s(&cb)]);
    assert!(fit.contains("codebook k=8 dim=4"), "{fit}");

    let tokens = tmp.path().join("tokens.jsonl");
    ok(&["quantize", "--manifest", s(&test), "--codebook", s(&cb), "--out", s(&tokens)]);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&tokens)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 16);
    assert!(lines[0]["tokens"]
        .as_array()
        .unwrap()
        .iter()
        .all(|t| t.as_u64().unwrap() < 8));

    let run_dir = tmp.path().join("run");
    let trained = ok(&[
        "--config",
        s(&cfg),
        "train",
        "--s2t-train",
        s(&train),
        "--codebook",
        s(&cb),
        "--out",
        s(&run_dir),
    ]);
    assert!(trained.contains("trained to step 6"), "{trained}");
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);

    let ck = run_dir.join("checkpoint.ckpt");
    let reports = tmp.path().join("reports");
    let eval = ok(&[
        "--config",
        s(&cfg),
        "eval-s2t",
        "--checkpoint",
        s(&ck),
        "--manifest",
        s(&test),
        "--out",
        s(&reports),
    ]);
    assert!(eval.contains("S2T aggregate R@1"), "{eval}");
    assert!(eval.contains("WER"), "{eval}");
    for f in ["eval-s2t.json", "eval-s2t.groups.csv", "eval-s2t.languages.tsv"] {
        assert!(reports.join(f).exists(), "{f}");
    }

    let again = ok(&["--config", s(&cfg), "eval-s2t", "--checkpoint", s(&ck), "--manifest", s(&test)]);
    assert_eq!(eval, again);

    let rendered = ok(&["report", s(&reports.join("eval-s2t.json"))]);
    assert!(rendered.contains("All"), "{rendered}");

    let emb = tmp.path().join("emb.jsonl");
    ok(&[
        "embed",
        "--checkpoint",
        s(&ck),
        "--manifest",
        s(&test),
        "--side",
        "transcript",
        "--out",
        s(&emb),
    ]);
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&emb).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["embedding"].as_array().unwrap().len(), 8);
    assert_eq!(first["modality"], "Text");
}
