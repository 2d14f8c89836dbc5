use std::path::Path;
use std::process::{Command, Output};

fn streamseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamseg")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .trim()
        .parse()
        .expect("number")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn synth_train_run_eval() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("scene");
    let weights = dir.path().join("w.json");
    let pred = dir.path().join("pred.csv");
    let latency = dir.path().join("latency.csv");

    let out = streamseg(&["synth", "--preset", "acceptance", "--out", path(&seq), "--save-spec"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(seq.join("scene.toml").exists());

    let out = streamseg(&["train", "--seq", path(&seq), "--epochs", "5", "--out-weights", path(&weights)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(value(&text, "l_total_final") < value(&text, "l_total_initial"));

    let out = streamseg(&[
        "run", "--seq", path(&seq), "--weights", path(&weights), "--pred-out", path(&pred), "--latency-log", path(&latency),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert_eq!(value(&text, "frames"), 16.0);
    assert!(value(&text, "instances") >= 1.0);
    assert!(std::fs::read_to_string(&latency).unwrap().starts_with("frame,fusion_ms"));

    let out = streamseg(&["eval", "--seq", path(&seq), "--pred", path(&pred)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let (ap, ap50, ap25) = (value(&text, "ap"), value(&text, "ap50"), value(&text, "ap25"));
    assert!((0.0..=1.0).contains(&ap) && ap <= ap50 && ap50 <= ap25);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "intra_threshold = 0.7\nprune_threshold = 1.5\n").unwrap();
    let out = streamseg(&["run", "--seq", "unused", "--config", path(&cfg), "--prune-threshold", "1.6", "--print-config"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("intra_threshold = 0.7"), "{text}");
    assert!(text.contains("prune_threshold = 1.6"), "{text}");
}

#[test]
fn gradcheck_passes() {
    let out = streamseg(&["gradcheck"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 9, "{text}");
}

#[test]
fn invalid_settings_exit_with_code_2() {
    let out = streamseg(&["run", "--seq", "unused", "--intra-threshold", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_frame_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("scene");
    assert!(streamseg(&["synth", "--preset", "acceptance", "--out", path(&seq)]).status.success());
    let first = std::fs::read_to_string(seq.join("manifest.txt")).unwrap().lines().next().unwrap().to_string();
    let file = seq.join(first);
    let mut bytes = std::fs::read(&file).unwrap();
    bytes[0] = b'X';
    std::fs::write(&file, bytes).unwrap();
    let out = streamseg(&["run", "--seq", path(&seq)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn missing_sequence_exits_with_code_1() {
    let out = streamseg(&["run", "--seq", "/nonexistent/sequence"]);
    assert_eq!(out.status.code(), Some(1));
}
