use std::path::Path;
use std::process::{Command, Output};

const LIMO: &str = env!("CARGO_BIN_EXE_limo");
const ECHO: &str = env!("CARGO_BIN_EXE_limo-echo-oracle");

/// Small enough to train in a few seconds.
const TINY: &[&str] = &[
    "--data.synthetic_count",
    "300",
    "--model.m",
    "8",
    "--model.embed",
    "8",
    "--model.hidden",
    "[32, 32]",
    "--train.epochs",
    "1",
    "--predictor.dataset_size",
    "120",
    "--predictor.epochs",
    "2",
    "--predictor.properties",
    "[\"plogp\"]",
    "--optimize.steps",
    "5",
    "--optimize.restarts",
    "6",
];

fn limo(dir: &Path, args: &[&str]) -> Output {
    Command::new(LIMO)
        .current_dir(dir)
        .args(args)
        .args(TINY)
        .env("RUST_LOG", "warn")
        .output()
        .expect("limo runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = limo(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn failure(dir: &Path, args: &[&str]) -> String {
    let out = limo(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth-corpus"]);
    ok(dir.path(), &["train-vae"]);
    dir
}

fn single_file(dir: &Path, prefix: &str) -> std::path::PathBuf {
    let mut hits: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(hits.len(), 1, "{prefix}: {hits:?}");
    hits.pop().unwrap()
}

#[test]
fn sampling_twice_gives_identical_files() {
    let dir = trained();
    let work = dir.path().join("limo-work");
    ok(dir.path(), &["sample", "--count", "1000", "--seed", "7"]);
    let path = single_file(&work, "samples-");
    let first = std::fs::read(&path).unwrap();
    ok(dir.path(), &["sample", "--count", "1000", "--seed", "7"]);
    assert_eq!(single_file(&work, "samples-"), path);
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(std::str::from_utf8(&first).unwrap().lines().count(), 1001);
    ok(dir.path(), &["sample", "--count", "1000", "--seed", "8"]);
    let samples = std::fs::read_dir(&work)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("samples-")
        })
        .count();
    assert_eq!(samples, 2);
}

#[test]
fn missing_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = failure(dir.path(), &["sample"]);
    assert!(err.contains("checkpoint not found"), "{err}");
    assert_eq!(err.lines().count(), 1, "{err}");
    let err = failure(dir.path(), &["sample", "--paths.vae", "nowhere.limo"]);
    assert!(err.contains("checkpoint not found: nowhere.limo"), "{err}");
}

#[test]
fn malformed_config_keys_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let err = failure(dir.path(), &["show-config", "--optimize.stepz", "3"]);
    assert!(err.contains("optimize.stepz"), "{err}");
    std::fs::write(dir.path().join("bad.toml"), "[filter]\nqed_minimum = 0.5\n").unwrap();
    let err = failure(dir.path(), &["show-config", "--config", "bad.toml"]);
    assert!(err.contains("filter.qed_minimum"), "{err}");
}

#[test]
fn flags_beat_environment_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "[optimize]\nsteps = 11\nlr = 0.3\nseed = 4\n",
    )
    .unwrap();
    let out = Command::new(LIMO)
        .current_dir(dir.path())
        .args([
            "show-config",
            "--config",
            "c.toml",
            "--optimize.steps",
            "33",
        ])
        .env("LIMO_OPTIMIZE__STEPS", "22")
        .env("LIMO_OPTIMIZE__LR", "0.2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg =
        limo::config::RunConfig::from_toml(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(
        (cfg.optimize.steps, cfg.optimize.lr, cfg.optimize.seed),
        (33, 0.2, 4)
    );
}

#[test]
fn oracle_check_against_echo_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["oracle-check", ECHO, "--mode", "heavy-atoms"]);
    assert!(out.contains("protocol OK: 10/10"), "{out}");
    let err = failure(dir.path(), &["oracle-check", ECHO, "--drop-id", "3"]);
    assert!(err.contains("#3"), "{err}");
    let err = failure(dir.path(), &["oracle-check"]);
    assert!(err.contains("no oracle command"), "{err}");
}

#[test]
fn a_held_lock_blocks_commands() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("limo-work");
    std::fs::create_dir_all(&work).unwrap();
    std::fs::write(work.join(limo::workspace::LOCK_FILE), "1\n").unwrap();
    let err = failure(dir.path(), &["synth-corpus"]);
    assert!(err.contains("in use"), "{err}");
}

#[test]
fn pipeline_leaves_inputs_untouched() {
    let dir = trained();
    let work = dir.path().join("limo-work");
    ok(dir.path(), &["train-predictor"]);
    ok(dir.path(), &["optimize"]);
    let optimized = single_file(&work, "optimized-");
    let before = std::fs::read(&optimized).unwrap();
    ok(dir.path(), &["filter"]);
    ok(
        dir.path(),
        &["filter", "--input", optimized.to_str().unwrap()],
    );
    assert_eq!(std::fs::read(&optimized).unwrap(), before);
    let filtered = single_file(&work, "filtered-");
    ok(dir.path(), &["finetune"]);
    single_file(&work, "finetuned-");
    let report = ok(dir.path(), &["bench", "maximize"]);
    assert!(report.contains("top1"), "{report}");
    let latest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(work.join("latest.json")).unwrap()).unwrap();
    assert_eq!(
        latest["filtered"].as_str().unwrap(),
        filtered.file_name().unwrap().to_str().unwrap()
    );
    let json = work.join(latest["report.maximize"].as_str().unwrap());
    let parsed: limo::bench::TaskReport =
        serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(parsed.task, "maximize");
    assert!(parsed.run_id.is_some());
}
