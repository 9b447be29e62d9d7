use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "hidden = 8\nembedding = 6\nextractor_pretrain_epochs = 2\ngenerative_pretrain_epochs = 2\nrl_iterations = 3\n";

fn skelstory(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skelstory"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "failed: {}", stderr(&o));
    o
}

/// A workspace with the toy corpus, a tiny config and a vocabulary.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        format!("{TINY}checkpoint_dir = \"ck\"\n"),
    )
    .unwrap();
    ok(skelstory(
        dir.path(),
        &["prepare-data", "--config", "c.toml", "--synthetic", "data"],
    ));
    dir
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (PathBuf::from(p.file_name().unwrap()), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = skelstory(dir.path(), &["train-rl", "--learning-rat", "0.1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = skelstory(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "hiden = 64\n").unwrap();
    let o = skelstory(dir.path(), &["pretrain-extractor", "--config", "c.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hiden"), "{}", stderr(&o));
    let o = skelstory(
        dir.path(),
        &["generate", "--input", "hi", "--set", "bacth=2"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bacth"));
}

#[test]
fn invalid_hyperparameter_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = skelstory(dir.path(), &["pretrain-extractor", "--set", "batch=0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = skelstory(dir.path(), &["prepare-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("story_train.jsonl"));
    let o = skelstory(
        dir.path(),
        &["pretrain-extractor", "--config", "absent.toml"],
    );
    assert_eq!(o.status.code(), Some(2));
    let last_line = stderr(&o).lines().last().unwrap().to_string();
    assert!(last_line.starts_with("error: ") && last_line.contains("absent.toml"));
}

#[test]
fn corrupt_checkpoints_are_data_errors() {
    let dir = prepared();
    let ck = dir.path().join("ck");
    fs::write(ck.join("i2s.pre.skel"), b"JUNKJUNK").unwrap();
    fs::write(ck.join("s2s.pre.skel"), b"JUNKJUNK").unwrap();
    let o = skelstory(
        dir.path(),
        &[
            "generate",
            "--config",
            "c.toml",
            "--input",
            "anna went home.",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));

    let mut bytes = b"SKEL".to_vec();
    bytes.extend_from_slice(&9u32.to_le_bytes());
    fs::write(ck.join("i2s.pre.skel"), bytes).unwrap();
    let o = skelstory(
        dir.path(),
        &[
            "generate",
            "--config",
            "c.toml",
            "--input",
            "anna went home.",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version 9"), "{}", stderr(&o));
}

#[test]
fn evaluate_identity_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = "the cat sat on the mat .\nmy dog ran far away today\n";
    fs::write(dir.path().join("c.txt"), text).unwrap();
    let o = ok(skelstory(
        dir.path(),
        &["evaluate", "--candidates", "c.txt", "--references", "c.txt"],
    ));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["bleu"], 1.0);
}

#[test]
fn evaluate_rejects_mismatched_files() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.txt"), "one\ntwo\n").unwrap();
    fs::write(dir.path().join("b.txt"), "one\n").unwrap();
    let o = skelstory(
        dir.path(),
        &["evaluate", "--candidates", "a.txt", "--references", "b.txt"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resolved_config_is_echoed_and_stored() {
    let dir = prepared();
    let o = ok(skelstory(
        dir.path(),
        &["pretrain-extractor", "--config", "c.toml", "--seed", "42"],
    ));
    assert!(stderr(&o).contains("seed = 42"));
    assert!(stderr(&o).contains("learning_rate = 0.6"));
    let stored = fs::read_to_string(dir.path().join("ck/pretrain-extractor.config.toml")).unwrap();
    assert!(stored.lines().any(|l| l == "seed = 42"));
    assert!(stored.lines().any(|l| l == "hidden = 8"));
}

#[test]
fn pipeline_runs_and_respects_generation_limits() {
    let dir = prepared();
    let before = files(&dir.path().join("data"));
    ok(skelstory(
        dir.path(),
        &["pretrain-extractor", "--config", "c.toml"],
    ));
    ok(skelstory(
        dir.path(),
        &["pretrain-generator", "--config", "c.toml"],
    ));
    ok(skelstory(dir.path(), &["train-rl", "--config", "c.toml"]));
    assert_eq!(
        files(&dir.path().join("data")),
        before,
        "corpus files were modified"
    );
    for name in ["extractor", "i2s", "s2s"] {
        for stage in ["pre", "rl"] {
            assert!(dir.path().join(format!("ck/{name}.{stage}.skel")).is_file());
            assert!(dir
                .path()
                .join(format!("ck/{name}.{stage}.opt.skel"))
                .is_file());
        }
    }
    let log = fs::read_to_string(dir.path().join("ck/train-rl.metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["phase"], "reinforce");
        assert!(r["rc"].as_f64().unwrap() <= 1.0);
        assert!(r.get("wall_time_s").is_none());
    }

    let o = ok(skelstory(
        dir.path(),
        &[
            "generate",
            "--config",
            "c.toml",
            "--input",
            "the park was filled with beauty.",
            "--trace",
        ],
    ));
    let trace: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let steps = trace["steps"].as_array().unwrap();
    let sentences: Vec<&str> = steps
        .iter()
        .map(|s| s["sentence"].as_str().unwrap())
        .filter(|s| *s != "</story>")
        .collect();
    assert!(sentences.len() <= 6);
    assert!(sentences.iter().all(|s| s.split(' ').count() <= 40));

    let o = ok(skelstory(
        dir.path(),
        &[
            "extract",
            "--config",
            "c.toml",
            "--input",
            "Anna saw a kite at the park.",
        ],
    ));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1);

    let o = ok(skelstory(
        dir.path(),
        &["evaluate", "--config", "c.toml", "--stage", "pre"],
    ));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["bleu"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["stopwords"], "english-v1");
}

#[test]
fn stage_commands_match_full_run_and_repeat_exactly() {
    let staged = prepared();
    for cmd in ["pretrain-extractor", "pretrain-generator", "train-rl"] {
        ok(skelstory(
            staged.path(),
            &[
                cmd,
                "--config",
                "c.toml",
                "--seed",
                "42",
                "--set",
                "metrics_log=ck/all.jsonl",
            ],
        ));
    }
    let full = prepared();
    let again = prepared();
    for d in [&full, &again] {
        ok(skelstory(
            d.path(),
            &[
                "train-rl",
                "--full",
                "--config",
                "c.toml",
                "--seed",
                "42",
                "--set",
                "metrics_log=ck/all.jsonl",
            ],
        ));
    }
    let artifacts = |d: &tempfile::TempDir| -> Vec<(PathBuf, Vec<u8>)> {
        files(&d.path().join("ck"))
            .into_iter()
            .filter(|(p, _)| !p.to_string_lossy().ends_with(".config.toml"))
            .collect()
    };
    assert_eq!(artifacts(&full), artifacts(&again));
    let staged_ckpts: Vec<_> = artifacts(&staged)
        .into_iter()
        .filter(|(p, _)| p.to_string_lossy().ends_with(".skel"))
        .collect();
    let full_ckpts: Vec<_> = artifacts(&full)
        .into_iter()
        .filter(|(p, _)| p.to_string_lossy().ends_with(".skel"))
        .collect();
    assert_eq!(staged_ckpts.len(), 12);
    assert_eq!(staged_ckpts, full_ckpts);
}
