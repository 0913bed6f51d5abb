use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dialoglens(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dialoglens"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", "corpus"];
    args.extend_from_slice(extra);
    let o = dialoglens(&args, dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn demo_run_succeeds_and_logs_key_values() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let o = dialoglens(&["--jobs", "2", "run", "--config", "corpus/config.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = stderr(&o);
    assert!(log.lines().any(|l| l.starts_with("info extract status=ok items=6")), "{log}");
    assert!(log.lines().all(|l| l.split(' ').count() >= 3));
    let manifest = json(&dir.path().join("corpus/out/manifest.json"));
    assert_eq!(manifest["sessions"].as_array().unwrap().len(), 6);
    assert_eq!(manifest["status"], "ok");
}

#[test]
fn missing_glossary_exits_2_before_any_stage() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let path = dir.path().join("corpus/config.json");
    let mut cfg = json(&path);
    cfg["glossary"] = "missing_glossary.txt".into();
    fs::write(&path, cfg.to_string()).unwrap();
    let o = dialoglens(&["run", "--config", "corpus/config.json"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("glossary"));
    assert!(!stderr(&o).contains("status=start"));
}

#[test]
fn stage_failure_exits_3_and_marks_output() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    fs::remove_file(dir.path().join("corpus/outcomes/marks_G01.csv")).unwrap();
    let o = dialoglens(&["run", "--config", "corpus/config.json"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(dir.path().join("corpus/out/FAILED").is_file());
    let manifest = json(&dir.path().join("corpus/out/manifest.json"));
    assert_eq!(manifest["failed_stage"], "aggregate");
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--groups", "10"]);
    let run = |args: &[&str]| {
        let o = dialoglens(args, dir.path());
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    run(&["parse", "--corpus", "corpus/transcripts", "--rosters", "corpus/rosters.json", "--out", "parsed"]);
    assert_eq!(json(&dir.path().join("parsed/sessions.json"))["sessions"].as_array().unwrap().len(), 20);
    run(&["extract", "--config", "corpus/config.json", "--out", "ex"]);
    assert_eq!(fs::read_dir(dir.path().join("ex/features")).unwrap().count(), 20);
    assert!(!dir.path().join("ex/group_features.csv").exists());
    run(&["aggregate", "--features", "ex/features", "--outcomes", "corpus/outcomes", "--out", "agg"]);
    run(&["analyze", "--features", "agg/group_features.csv", "--outcomes", "agg/outcomes.csv", "--out", "an"]);
    assert!(dir.path().join("an/screening.json").is_file());
    let cv = ["--model", "gnb", "--search", "grid", "--outer", "2", "--inner", "2", "--seed", "3"];
    let mut args = vec![
        "train",
        "--features",
        "an/normalized_features.csv",
        "--labels",
        "agg/outcomes.csv",
        "--screening",
        "an/screening.json",
        "--out",
        "model.json",
    ];
    args.extend_from_slice(&cv);
    run(&args);
    let o = run(&[
        "evaluate",
        "--model",
        "model.json",
        "--features",
        "an/normalized_features.csv",
        "--labels",
        "agg/outcomes.csv",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let acc = report["result"]["pooled_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn mixing_artifacts_from_different_configs_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let o = dialoglens(&["run", "--config", "corpus/config.json", "--out", "a"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let path = dir.path().join("corpus/config.json");
    let mut cfg = json(&path);
    cfg["alpha"] = 0.01.into();
    fs::write(&path, cfg.to_string()).unwrap();
    let o = dialoglens(&["run", "--config", "corpus/config.json", "--out", "b"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = dialoglens(
        &["analyze", "--features", "a/group_features.csv", "--outcomes", "b/outcomes.csv", "--out", "x"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("different configs"), "{}", stderr(&o));
}

#[test]
fn split_finds_lecture_windows_in_synthetic_recording() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--recording"]);
    let o = dialoglens(
        &["split", "--session-dir", "corpus/recording", "--out", "split", "--write-audio"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = json(&dir.path().join("split/split.json"));
    let tracks = summary["tracks"].as_array().unwrap();
    assert_eq!(tracks.len(), 3);
    let lag = tracks[1]["offset"]["lag_seconds"].as_f64().unwrap();
    assert!((lag - 1.37).abs() <= 2.5, "{lag}");
    for id in ["dev1", "dev2", "dev3"] {
        let cuts = fs::read_to_string(dir.path().join(format!("split/{id}_cuts.csv"))).unwrap();
        assert!(cuts.starts_with("keep_start_s,keep_end_s\n"));
        assert!(dir.path().join(format!("split/{id}_discussion.wav")).is_file());
    }
}

#[test]
fn bad_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = dialoglens(&["synth", "--groups", "2", "--out", "c"], dir.path());
    assert_eq!(code(&o), 2);
    let o = dialoglens(&["split", "--session-dir", ".", "--out", "s"], dir.path());
    assert_eq!(code(&o), 2);
    let o = dialoglens(&["frobnicate"], dir.path());
    assert_eq!(code(&o), 2);
}
