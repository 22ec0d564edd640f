use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn satrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_satrack"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = satrack(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg: serde_json::Value = serde_json::from_str(&ok(&["print-config", "--preset", "desk"])).unwrap();
    cfg["epochs"] = 2.into();
    cfg["lr_decay_epoch"] = 1.into();
    cfg["samples_per_epoch"] = 4.into();
    cfg["batch_size"] = 2.into();
    let p = dir.join("tiny.json");
    fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["generate-data", "--seed", "3", "--count", "3", "--length", "6", "--out", s(&data)]);
    assert_eq!(fs::read_dir(&data).unwrap().count(), 3);

    let cfg = tiny_config(tmp.path());
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let ckpt = run.join("checkpoint");
    let losses = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert!(losses.starts_with("epoch,step,giou,l1,dm,total"));
    assert_eq!(losses.lines().count(), 1 + 2 * 2);

    let report = tmp.path().join("report.csv");
    let stdout = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    assert!(stdout.contains("success"));
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    assert!(csv.lines().last().unwrap().starts_with("ALL,"));

    let seq = fs::read_dir(&data).unwrap().next().unwrap().unwrap().path();
    let boxes = tmp.path().join("boxes.txt");
    ok(&["track", "--ckpt", s(&ckpt), "--sequence", s(&seq), "--out", s(&boxes)]);
    let lines: Vec<String> = fs::read_to_string(&boxes).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l.split(',').count() == 5));

    let dump = tmp.path().join("dump");
    ok(&["inspect", "--ckpt", s(&ckpt), "--sample", s(&seq), "--dump-dir", s(&dump)]);
    let names: Vec<String> = fs::read_dir(&dump)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("attn")), "{names:?}");
    assert!(names.iter().any(|n| n.starts_with("dm_score")), "{names:?}");

    // A longer schedule resumes from the saved epoch.
    let mut longer: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    longer["epochs"] = 3.into();
    fs::write(&cfg, longer.to_string()).unwrap();
    let out = ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--resume"]);
    assert!(out.contains("trained 3 epochs"), "{out}");
}

#[test]
fn op_gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.lines().count() >= 30);
}

#[test]
fn invalid_input_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let cases: [&[&str]; 4] = [
        &["ablate", "--variants", "full,bogus", "--data", s(&missing)],
        &["eval", "--ckpt", s(&missing), "--data", s(&missing), "--report", "r.csv"],
        &["print-config", "--preset", "huge"],
        &["train", "--no-such-flag"],
    ];
    for args in cases {
        let out = satrack(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn help_exits_cleanly() {
    let out = ok(&["--help"]);
    for cmd in ["generate-data", "train", "eval", "track", "gradcheck", "ablate", "inspect"] {
        assert!(out.contains(cmd), "{cmd}");
    }
}
