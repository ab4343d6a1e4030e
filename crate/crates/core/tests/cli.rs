use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gesture-kd"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

const TINY: &str = "\
profile = desk
cycles = 2
base_epochs = 1
batch = 8
augment_factor = 2
synth_subjects = 3
synth_trials = 2
classes = 3
window = 6
heads = 2
ff_dim = 8
blocks = 1
lstm_hidden = 4
chunk_size = 2
head_width = 6
";

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn gradcheck_exits_zero_and_lists_components() {
    let out = run(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["transformer block", "on-lstm cell", "fusion mlp", "joint model loss", "cumax"] {
        assert!(text.contains(name), "missing {name}");
    }
}

#[test]
fn train_twice_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    for run_name in ["a", "b"] {
        let out_dir = dir.path().join(run_name).display().to_string();
        let out = run(&["train", "--config", &cfg, "--fold", "3", "--seed", "7", "--out", &out_dir, "--format", "csv"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["report.json", "report.csv", "report.txt"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let report = dir.path().join("a").display().to_string();
    let out = run(&["report", &report, "--format", "text"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("snapshot_ensemble"));

    // Re-evaluating existing snapshots reproduces the report.
    let a = dir.path().join("a").display().to_string();
    let before = std::fs::read(dir.path().join("a/report.json")).unwrap();
    let out = run(&["eval", "--config", &cfg, "--fold", "3", "--seed", "7", "--out", &a]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(dir.path().join("a/report.json")).unwrap(), before);

    // Training into a run directory that already holds snapshots is refused.
    let out = run(&["train", "--config", &cfg, "--fold", "3", "--seed", "7", "--out", &a]);
    assert!(!out.status.success());
}

#[test]
fn eval_without_snapshots_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("empty").display().to_string();
    let out = run(&["eval", "--config", &cfg, "--fold", "1", "--out", &out_dir]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no snapshots"));
}

#[test]
fn bad_invocations_fail() {
    assert!(!run(&["train", "--no-such-flag"]).status.success());
    assert!(!run(&["report"]).status.success());
    assert!(!run(&["report", "/nonexistent/report.json"]).status.success());
    assert!(!run(&["train", "--config", "/nonexistent.cfg"]).status.success());
}

#[test]
fn synth_and_augment_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data").display().to_string();
    let out = run(&["synth", "--config", &cfg, "--data", &data]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/gesture_3/finger_1/subject_3/essai_2/skeleton_world.txt").is_file());

    let out_dir = dir.path().join("run").display().to_string();
    let out = run(&["augment", "--config", &cfg, "--data", &data, "--out", &out_dir]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/augmented/provenance.json").is_file());
    assert_eq!(std::fs::read_dir(dir.path().join("run/augmented/records")).unwrap().count(), 18 * 2);
}
