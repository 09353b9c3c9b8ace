use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "cli"
[dataset]
count = 120
[teacher]
steps = 6
log_every = 0
[pruning.ca]
num_samples = 16
[distill]
steps = 3
batch_size = 4
log_every = 0
[eval]
num_samples = 32
ppl_pairs = 4
projection_targets = 1
[eval.projection]
steps = 2
init_samples = 8
"#;

fn gancomp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gancomp"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "[dataset]\ncount = 0\n").unwrap();
    let out = gancomp(dir.path(), &["--config", "bad.toml", "make-dataset"]);
    assert_eq!(out.status.code(), Some(2));
    let out = gancomp(
        dir.path(),
        &["--config", "run.toml", "prune", "--ratio", "1.5"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = gancomp(dir.path(), &["--config", "run.toml", "train-teacher"]);
    assert_eq!(out.status.code(), Some(2), "teacher without dataset");
}

#[test]
fn numerical_abort_exits_with_3_and_leaves_diagnostics() {
    let dir = setup();
    let text = format!("{CONFIG}[teacher.g_optimizer]\nlr = 1e30\n");
    std::fs::write(dir.path().join("nan.toml"), text).unwrap();
    assert!(
        gancomp(dir.path(), &["--config", "nan.toml", "make-dataset"])
            .status
            .success()
    );
    let out = gancomp(dir.path(), &["--config", "nan.toml", "train-teacher"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let diag = dir.path().join("runs/cli/metrics/teacher_diagnostics.json");
    assert!(std::fs::read_to_string(diag).unwrap().contains("grad_norm"));
}

#[test]
fn resume_skips_and_config_round_trips() {
    let dir = setup();
    let run = gancomp(dir.path(), &["--config", "run.toml", "--seed", "5", "run"]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let again = gancomp(
        dir.path(),
        &["--config", "run.toml", "--seed", "5", "--resume", "run"],
    );
    assert!(again.status.success());
    let log = String::from_utf8_lossy(&again.stderr);
    assert_eq!(log.matches("up to date, skipping").count(), 6, "{log}");

    let dumped = gancomp(dir.path(), &["--config", "runs/cli/config.toml", "config"]);
    let direct = gancomp(
        dir.path(),
        &["--config", "run.toml", "--seed", "5", "config"],
    );
    assert!(dumped.status.success());
    assert_eq!(dumped.stdout, direct.stdout);
    assert!(String::from_utf8_lossy(&dumped.stdout).contains("seed = 5"));
}
