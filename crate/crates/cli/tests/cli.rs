use std::path::Path;
use std::process::{Command, Output};

fn talk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_talk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn bench_writes_contracted_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = talk(&[
        "bench", "--core", "talk", "--core", "dynconv7", "--core", "attention", "--n", "16", "--n", "32", "--batch",
        "2", "--dim", "16", "--heads", "4", "--iters", "2", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("core,n,iters_per_sec,peak_bytes,status"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0][..2], ["talk", "16"]);
    assert_eq!(rows[1][0], "dynconv7");
    for r in &rows {
        assert_eq!(r[4], "ok");
        assert!(r[3].parse::<u64>().unwrap() > 0, "peak bytes tracked");
    }
}

#[test]
fn bench_to_stdout() {
    let o = talk(&["bench", "--core", "talk", "--n", "8", "--batch", "1", "--dim", "8", "--heads", "2", "--iters", "1"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("core,n,iters_per_sec,peak_bytes,status\ntalk,8,"));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let o = talk(&["gradcheck", "--seed", "1", "--trials", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("block"));

    let o = talk(&["gradcheck", "--seed", "1", "--trials", "5", "--corrupt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn oracle_diff_passes() {
    let o = talk(&["oracle-diff", "--trials", "50", "--dtype", "f32"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("pass"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(talk(&["bench", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(talk(&["bench", "--core", "talk"]).status.code(), Some(2));
    assert_eq!(talk(&["bench", "--core", "lstm", "--n", "4"]).status.code(), Some(2));
    assert_eq!(talk(&["nonsense"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let o = talk(&["train", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        r#"{"seq_len": 8, "vocab": 6, "dim": 8, "ffn_dim": 16, "heads": 2,
            "left_max": [4, 4], "warmup_steps": 2, "total_steps": 12, "batch_size": 4,
            "log_every": 4}"#,
    )
    .unwrap();
    path
}

#[test]
fn train_writes_report_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let report = dir.path().join("report.csv");
    let ckpt = dir.path().join("model.talk");
    let o = talk(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dtype",
        "f64",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss,lr,accuracy"));
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(&std::fs::read(&ckpt).unwrap()[..4], b"TALK");
    assert!(stdout(&o).contains("eval acc"));
}
