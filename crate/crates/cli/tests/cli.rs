use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attnprune"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn attnprune")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small model and dataset shared by most tests.
fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "init", "--seed", "1", "--d", "8", "--heads", "4", "--channels", "2", "--layers", "2", "--d-in", "4",
            "--classes", "3", "--out", "m.ckpt",
        ],
    );
    ok(
        p,
        &[
            "data", "gen", "--seed", "2", "--samples", "200", "--classes", "3", "--tokens", "6", "--d-in", "4", "--out",
            "data",
        ],
    );
    dir
}

#[test]
fn score_plan_prune_pipeline() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["score", "--ckpt", "m.ckpt", "--metric", "fisher", "--data", "data", "--out", "s.tsv"]);
    let scores = fs::read_to_string(p.join("s.tsv")).unwrap();
    assert!(scores.lines().any(|l| l == "layer\tside\thead\tchannel\tscore"));
    let stdout = ok(p, &["score", "--ckpt", "m.ckpt", "--metric", "l1"]);
    assert!(stdout.starts_with("# metric=l1 granularity=channel"));

    let msg = ok(
        p,
        &["plan", "--scores", "s.tsv", "--pattern", "per-head", "--threshold", "local", "--sparsity", "0.3", "--out", "p.txt"],
    );
    assert!(msg.contains("rounding"), "{msg}");
    let report = ok(p, &["prune", "--ckpt", "m.ckpt", "--plan", "p.txt", "--out", "m2.ckpt"]);
    assert!(report.contains("total\t512\t384\t0.250000"), "{report}");
    assert!(report.contains("layer\tsparsity\n0\t0.25\n1\t0.25"), "{report}");
}

#[test]
fn empty_plan_leaves_checkpoint_byte_identical() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["score", "--ckpt", "m.ckpt", "--metric", "l2", "--granularity", "head", "--out", "s.tsv"]);
    ok(p, &["plan", "--scores", "s.tsv", "--pattern", "entire-head", "--sparsity", "0", "--out", "empty.txt"]);
    ok(p, &["prune", "--ckpt", "m.ckpt", "--plan", "empty.txt", "--out", "same.ckpt"]);
    assert_eq!(fs::read(p.join("m.ckpt")).unwrap(), fs::read(p.join("same.ckpt")).unwrap());
}

#[test]
fn exit_codes_follow_failure_class() {
    let dir = setup();
    let p = dir.path();

    let out = run_in(p, &["score", "--ckpt", "m.ckpt", "--metric", "fisher"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"));
    assert_eq!(code(&run_in(p, &["init", "--out", "x", "--bogus"])), 2);

    // hand-written plan removing every head of layer 0
    fs::write(
        p.join("bad.txt"),
        "# pattern=entire-head layers=2 declared=0.5 achieved=0.5 removed_score=0\nlayer\tside\thead\tchannel\n\
         0\tqk\t0\t0\n0\tqk\t0\t1\n0\tqk\t1\t0\n0\tqk\t1\t1\n0\tqk\t2\t0\n0\tqk\t2\t1\n0\tqk\t3\t0\n0\tqk\t3\t1\n",
    )
    .unwrap();
    let out = run_in(p, &["prune", "--ckpt", "m.ckpt", "--plan", "bad.txt", "--out", "x.ckpt"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!p.join("x.ckpt").exists());

    assert_eq!(code(&run_in(p, &["train", "--ckpt", "missing.ckpt", "--data", "data", "--out", "x"])), 4);
    let mut bytes = fs::read(p.join("m.ckpt")).unwrap();
    bytes.pop();
    fs::write(p.join("cut.ckpt"), bytes).unwrap();
    assert_eq!(code(&run_in(p, &["score", "--ckpt", "cut.ckpt", "--metric", "l2"])), 4);

    let out = run_in(p, &["train", "--ckpt", "m.ckpt", "--data", "data", "--lr", "1e300", "--out", "t.ckpt"]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn run_and_report_match_frozen_fixture() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["train", "--ckpt", "m.ckpt", "--data", "data", "--epochs", "5", "--lr", "1e-2", "--out", "warm.ckpt"]);
    ok(p, &["run", "--ckpt", "warm.ckpt", "--data", "data", "--ft-epochs", "1", "--out-dir", "runs/fisher"]);
    ok(
        p,
        &[
            "run", "--ckpt", "warm.ckpt", "--data", "data", "--pattern", "same-channel", "--metric", "l2",
            "--threshold", "local", "--ft-epochs", "1", "--out-dir", "runs/l2",
        ],
    );
    let report = fs::read_to_string(p.join("runs/fisher/report.tsv")).unwrap();
    let targets: Vec<&str> = report.lines().skip(1).take(7).map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(targets, ["0.0000", "0.1000", "0.2000", "0.3000", "0.4000", "0.5000", "0.6000"]);
    assert!(p.join("runs/fisher/final.ckpt").exists() && p.join("runs/fisher/layers.tsv").exists());

    let table = ok(p, &["report", "--run-dir", "runs"]);
    assert!(table.starts_with("pattern\tthreshold\tmetric\t0%\t10%\t20%\t30%\t40%\t50%\t60%\n"));

    let combined = format!("{report}{table}");
    let path = fixture("pipeline.tsv");
    if std::env::var_os("ATTNPRUNE_FREEZE").is_some() {
        fs::write(&path, &combined).unwrap();
    }
    assert_eq!(combined, fs::read_to_string(&path).expect("frozen pipeline fixture"));
}

#[test]
fn history_replays_to_the_final_checkpoint() {
    let dir = setup();
    let p = dir.path();
    ok(
        p,
        &[
            "run", "--ckpt", "m.ckpt", "--data", "data", "--metric", "l2", "--steps", "2", "--step", "0.25",
            "--ft-epochs", "1", "--lr", "0", "--out-dir", "r",
        ],
    );
    let fin = attnprune::Checkpoint::load(&p.join("r/final.ckpt")).unwrap();
    let orig = attnprune::Checkpoint::load(&p.join("m.ckpt")).unwrap();
    assert_eq!(fin.history.len(), 2);
    let mut m = orig.model;
    for plan in &fin.history {
        m = attnprune::apply_plan(&m, plan).unwrap();
    }
    // lr 0 leaves weights untouched, so replaying the plans is exact
    assert_eq!(m, fin.model);
}
