use std::path::Path;
use std::process::{Command, Output};

fn fspo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fspo")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_then_eval_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"iterations": 4, "dump_rollouts": true, "checkpoint_every": 2}"#).unwrap();
    let o = fspo(&["train", "--config", "c.json", "--out-dir", "run", "--seed", "3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("seed                     3"));
    for f in ["metrics.csv", "rollouts.jsonl", "final_checkpoint.json", "dataset.json", "config.json", "checkpoints/iter_000004.json"] {
        assert!(dir.path().join("run").join(f).exists(), "missing {f}");
    }
    let o = fspo(&["eval", "--checkpoint", "run/final_checkpoint.json", "--out-dir", "ev", "--samples", "4"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("ev/eval.json").exists() && dir.path().join("ev/eval_rollouts.jsonl").exists());
    let o = fspo(&["replay", "--run", "run", "--out-dir", "rp"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mismatches    []"));
}

#[test]
fn seed_flag_drives_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"iterations": 3}"#).unwrap();
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "8" } else { "7" };
        assert!(fspo(&["train", "--config", "c.json", "--out-dir", out, "--seed", seed], dir.path()).status.success());
    }
    let strip = |d: &str| {
        let text = std::fs::read_to_string(dir.path().join(d).join("metrics.csv")).unwrap();
        text.lines()
            .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != 1).map(|(_, x)| x).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip("a"), strip("b"));
    assert_ne!(strip("a"), strip("c"));
}

#[test]
fn theory_subcommands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 5] = [
        &["theory", "variance", "--samples", "2000"],
        &["theory", "stationarity"],
        &["theory", "entropy", "--samples", "200", "--grid", "20"],
        &["theory", "hitting-time", "--eps", "0.5", "--trials", "100"],
        &["theory", "gradcheck"],
    ];
    for (args, name) in cases.iter().zip(["variance", "stationarity", "entropy", "hitting_time", "gradcheck"]) {
        let mut a = args.to_vec();
        a.extend(["--out-dir", "t"]);
        let o = fspo(&a, dir.path());
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let json = std::fs::read_to_string(dir.path().join(format!("t/theory_{name}.json"))).unwrap();
        assert!(json.trim_start().starts_with('{'));
        assert!(dir.path().join(format!("t/theory_{name}.txt")).exists());
    }
    let o = fspo(&["theory", "stationarity", "--out-dir", "t"], dir.path());
    assert!(stdout(&o).contains("stationary_under_answer  true"));
}

#[test]
fn gen_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = fspo(&["gen", "--seed", "5", "--instances", "3", "--out-dir", "g"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("g/dataset.json")).unwrap();
    assert!(text.contains("\"seed\": 5"));
}

#[test]
fn ablate_runs_every_arm() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"iterations": 2}"#).unwrap();
    let o = fspo(&["ablate", "--config", "c.json", "--out-dir", "ab"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("ab/comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 2);
}

#[test]
fn failures_are_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"clip_eps": 1.5}"#).unwrap();
    let cases: [(&[&str], &str); 4] = [
        (&["train", "--config", "bad.json"], "config"),
        (&["train", "--config", "missing.json"], "io"),
        (&["gen", "--facts", "100", "--out-dir", "g"], "config"),
        (&["theory", "entropy", "--eps", "0.5", "--k", "3"], "contract"),
    ];
    for (args, kind) in cases {
        let o = fspo(args, dir.path());
        assert!(!o.status.success());
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error[{kind}]: ")), "{err}");
    }
}
