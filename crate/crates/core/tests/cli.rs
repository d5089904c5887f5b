use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geolatent"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert!(run(dir.path(), &["gen-data", "--out", out, "--seed", "4", "--points", "50"]).status.success());
    }
    let names: Vec<_> = std::fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 5);
    for n in names {
        let a = std::fs::read(dir.path().join("a").join(&n)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&n)).unwrap();
        assert_eq!(a, b, "{n:?}");
        if n.to_string_lossy().ends_with(".csv") {
            assert_eq!(String::from_utf8(a).unwrap().lines().count(), 51);
        }
    }
}

#[test]
fn zero_steps_writes_an_initialized_checkpoint_and_info_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(run(d, &["gen-data", "--out", "data", "--points", "40"]).status.success());
    std::fs::write(d.join("run.json"), r#"{"preset": "micro", "data_dir": "data", "steps": 10}"#).unwrap();
    let out = run(d, &["train", "--config", "run.json", "--out", "out", "--steps", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("out/model.ckpt").exists());
    assert!(d.join("out/run_config.json").exists());
    assert_eq!(std::fs::read_to_string(d.join("out/train_log.jsonl")).unwrap(), "");

    let a = run(d, &["info", "--checkpoint", "out/model.ckpt"]);
    let b = run(d, &["info", "--checkpoint", "out/model.ckpt"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let total: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("parameters: "))
        .unwrap()
        .parse()
        .unwrap();
    let parts: usize = text
        .lines()
        .skip_while(|l| !l.starts_with("parameters: "))
        .skip(1)
        .map(|l| l.split_whitespace().last().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, parts);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let usage = run(d, &["eval", "--checkpoint", "x.ckpt", "--protocol", "sideways"]);
    assert_eq!(usage.status.code(), Some(2));

    std::fs::write(d.join("bad.ckpt"), b"not a checkpoint at all").unwrap();
    let data = run(d, &["info", "--checkpoint", "bad.ckpt"]);
    assert_eq!(data.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&data.stderr).contains("bad.ckpt"));

    assert!(run(d, &["gen-data", "--out", "data", "--points", "40"]).status.success());
    std::fs::write(d.join("run.json"), r#"{"preset": "micro", "data_dir": "data", "steps": 0}"#).unwrap();
    assert!(run(d, &["train", "--config", "run.json", "--out", "out"]).status.success());
    let unknown = run(d, &["reconstruct", "--checkpoint", "out/model.ckpt", "--modality", "gravity", "--resolution", "5", "--out", "g.csv"]);
    assert_eq!(unknown.status.code(), Some(2));
}
