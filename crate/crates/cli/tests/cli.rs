use std::process::{Command, Output};

use tempfile::TempDir;

fn weatherocc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weatherocc"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(weatherocc(&[]).status.code(), Some(2));
}

#[test]
fn negative_scene_count_names_the_flag() {
    let dir = TempDir::new().unwrap();
    let out = weatherocc(&[
        "gen",
        "--scenes",
        "-1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("scenes"), "{}", stderr(&out));
}

#[test]
fn zero_scenes_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = weatherocc(&[
        "gen",
        "--scenes",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("scenes"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("nope.wock");
    let out = weatherocc(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nope.wock"));
}

#[test]
fn bad_config_value_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "epochs = many\n").unwrap();
    let out = weatherocc(&["train", "--data", ".", "--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("epochs"));
}

#[test]
fn unknown_strategy_is_rejected() {
    let out = weatherocc(&["train", "--data", ".", "--strategy", "median"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_echoes_config_and_writes_scenes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().join("d");
    let out = weatherocc(&[
        "gen",
        "--scenes",
        "3",
        "--seed",
        "7",
        "--out",
        d.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# resolved config\n"));
    assert!(text.contains("scenes = 3\n") && text.contains("seed = 7\n"));
    assert!(text.contains("wrote 3 scenes"));
    let manifest = std::fs::read_to_string(d.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
}

#[test]
fn train_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().join("d");
    let ckpt = dir.path().join("m.wock");
    assert!(weatherocc(&[
        "gen",
        "--scenes",
        "2",
        "--seed",
        "1",
        "--out",
        d.to_str().unwrap()
    ])
    .status
    .success());
    let train = weatherocc(&[
        "train",
        "--data",
        d.to_str().unwrap(),
        "--epochs",
        "1",
        "--strategy",
        "concat",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(train.status.success(), "{}", stderr(&train));
    assert!(dir.path().join("m.wock.log").exists());

    let eval = weatherocc(&[
        "--tsv",
        "eval",
        "--by-condition",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        d.to_str().unwrap(),
    ]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let text = String::from_utf8(eval.stdout).unwrap();
    assert!(text.contains("strategy = concat\n"));
    assert!(text.contains("mIoU\t") && text.contains("Rainy\t"));
}

#[test]
fn gradcheck_single_op() {
    let out = weatherocc(&["--tsv", "gradcheck", "--op", "lora"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text
        .lines()
        .any(|l| l.starts_with("lora\t") && l.ends_with("\tpass")));
}

#[test]
fn bench_rejects_unknown_grid() {
    let out = weatherocc(&["bench", "--grid", "huge"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("grid"));
}
