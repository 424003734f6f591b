use std::path::Path;
use std::process::{Command, Output};

fn cvsparse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvsparse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    let text = format!(
        "dataset.source = synthetic\ndataset.synthetic.n_per_class = 24\nmodel.hidden = 8\n\
         pretrain.epochs = 2\nsparsify.epochs = 2\nfinetune.epochs = 1\nexperiment.replications = 0\n{extra}"
    );
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn gradcheck_passes_with_zero_exit() {
    let o = cvsparse(&["gradcheck"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("[PASS]"));
    assert!(text
        .lines()
        .any(|l| l.starts_with("linear") && l.contains("cvd") && l.contains("exact")));
}

#[test]
fn verify_lrt_reports_both_branches() {
    let o = cvsparse(&["verify-lrt", "--samples", "20000", "--zero-variance"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("zero variance"));
    let o = cvsparse(&["verify-lrt", "--samples", "100"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_kl_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cvsparse(&[
        "verify-kl",
        "--grid",
        "1024",
        "--samples",
        "10000",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("kl_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1025);
    assert_eq!(
        cvsparse(&["verify-kl", "--grid", "1"]).status.code(),
        Some(2)
    );
}

#[test]
fn train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment.c_grid = 0.01, 0.1\n");
    let out = dir.path().join("out");
    let o = cvsparse(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.starts_with("3,")));

    let o = cvsparse(&[
        "report",
        out.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 3);
    assert!(out.join("report.csv").exists());

    // Resuming a finished run replays nothing and leaves the metrics alone.
    let o = cvsparse(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
        "--resume",
    ]);
    assert!(o.status.success());
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model.depth = 3\n");
    let o = cvsparse(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.depth"));
}

#[test]
fn empty_report_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        cvsparse(&["report", dir.path().to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}
