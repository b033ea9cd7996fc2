use std::path::Path;
use std::process::{Command, Output};

fn kpanim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpanim")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = kpanim(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY: [&str; 12] = [
    "--set", "base_channels=4", "--set", "max_channels=16", "--set", "disc_base=4", "--set", "disc_max=16",
    "--set", "batch_size=4", "--epochs", "1",
];

fn dataset(dir: &Path) -> String {
    let data = dir.join("data");
    let d = data.to_str().unwrap().to_string();
    ok(&["make-dataset", "--out", &d, "--seed", "3", "--videos", "10", "--frames", "3", "--size", "32"]);
    d
}

fn train(data: &str, out: &Path) -> String {
    let o = out.to_str().unwrap();
    let mut args = vec!["train", "--data", data, "--out", o, "--seed", "7", "--k", "3"];
    args.extend_from_slice(&TINY);
    ok(&args);
    out.join("checkpoint.bin").to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(kpanim(&["train", "--out", "x"]).status.code(), Some(2));
    assert_eq!(kpanim(&["evaluate", "--bogus"]).status.code(), Some(2));
    assert_eq!(kpanim(&["frobnicate"]).status.code(), Some(2));
    let bad_mode = kpanim(&["animate", "--checkpoint", "c", "--source", "s", "--data", "d", "--out", "o", "--mode", "sideways"]);
    assert_eq!(bad_mode.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.bin");
    let out = kpanim(&["evaluate", "--checkpoint", missing.to_str().unwrap(), "--data", "."]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let bad_ablation = kpanim(&["train", "--data", ".", "--out", "o", "--ablation", "no_such"]);
    assert_eq!(bad_ablation.status.code(), Some(1));
}

#[test]
fn training_twice_gives_identical_checkpoints_and_tools_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let a = train(&data, &dir.path().join("a"));
    let b = train(&data, &dir.path().join("b"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let eval = ok(&["evaluate", "--checkpoint", &a, "--data", &data]);
    assert!(String::from_utf8_lossy(&eval.stdout).starts_with("videos 1 l1 "));

    let clip = format!("{data}/videos/0000");
    let rec = dir.path().join("rec");
    ok(&["reconstruct", "--checkpoint", &a, "--data", &clip, "--out", rec.to_str().unwrap()]);
    assert!(rec.join("frame_002.png").exists() && rec.join("clip.gif").exists());

    let source = format!("{data}/videos/0001/frame_000.png");
    for mode in ["relative", "absolute"] {
        let out = dir.path().join(mode);
        let o = out.to_str().unwrap();
        ok(&["animate", "--checkpoint", &a, "--source", &source, "--data", &clip, "--out", o, "--mode", mode]);
        assert!(out.join("side_by_side.gif").exists());
        let tracks = std::fs::read_to_string(out.join("keypoints.csv")).unwrap();
        assert_eq!(tracks.lines().filter(|l| !l.starts_with("frame")).count(), 3 * 3);
    }
    let rel = std::fs::read(dir.path().join("relative/frame_001.png")).unwrap();
    let abs = std::fs::read(dir.path().join("absolute/frame_001.png")).unwrap();
    assert_ne!(rel, abs);

    let kp = dir.path().join("kp");
    ok(&["show-keypoints", "--checkpoint", &a, "--data", &clip, "--out", kp.to_str().unwrap()]);
    assert!(kp.join("frame_000.png").exists() && kp.join("keypoints.csv").exists());
}

#[test]
fn kp_sweep_writes_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("sweep");
    let mut args = vec!["kp-sweep", "--data", &data, "--out", out.to_str().unwrap(), "--k", "1,2", "--seed", "1"];
    args.extend_from_slice(&TINY);
    ok(&args);
    let csv = std::fs::read_to_string(out.join("kp_sweep.csv")).unwrap();
    let ks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["1", "2"]);
}

#[test]
fn forced_gradient_failure_names_the_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let out = kpanim(&[
        "check", "--only", "1", "--corrupt-gradients", "1e-3", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed criteria: 1 (gradient soundness)"));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(",false"));
    assert!(dir.path().join("report.md").exists());
}
