use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resformer"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn build_reports_counts_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["build", "--arch", "Ti", "--out", "ti"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("params ≈ 11.18M"), "{text}");
    assert!(text.contains("reported 11.14M"), "{text}");
    assert!(text.contains("excluding BN affine: 11.14M"), "{text}");
    for f in ["config.txt", "build.json", "model.ckpt"] {
        assert!(dir.path().join("ti").join(f).is_file(), "{f}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["build"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["build", "--arch", "Ti", "--set", "bogus=1"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["build", "--arch", "Huge"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["eval", "--checkpoint", "nope.ckpt", "--dataset", "synthetic:train=10,test=10"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(!o.stderr.is_empty());
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("nano.cfg"), "arch = Nano\ntime_steps = 2\n").unwrap();
    let o = run(dir.path(), &["build", "--config", "nano.cfg", "--time-steps", "3", "--out", "o"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = std::fs::read_to_string(dir.path().join("o/config.txt")).unwrap();
    assert!(cfg.contains("time_steps = 3"), "{cfg}");
}

#[test]
fn lr_zero_training_leaves_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let ds = "synthetic:train=10,test=5";
    let a = run(dir.path(), &["build", "--arch", "Nano", "--seed", "4", "--out", "a"]);
    assert_eq!(a.status.code(), Some(0));
    let b = run(
        dir.path(),
        &["train", "--arch", "Nano", "--seed", "4", "--dataset", ds, "--set", "train.lr=0", "--set", "train.lr_min=0", "--set", "train.batch_size=10", "--set", "train.epochs=1", "--out", "b"],
    );
    assert_eq!(b.status.code(), Some(0), "{}", String::from_utf8_lossy(&b.stderr));
    let load = |p: &str| resformer::model::load(&dir.path().join(p), None).unwrap();
    let (ma, mb) = (load("a/model.ckpt"), load("b/model.ckpt"));
    for ((na, pa), (nb, pb)) in ma.params.iter().zip(mb.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(pa.value.data(), pb.value.data(), "{}", pa.name);
    }
}

#[test]
fn verify_conv_equivalence_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify", "conv-equiv"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().count() >= 2);
}
