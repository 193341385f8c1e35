use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[model]
width = 16
heads = 2
groups = 2
ffn_width = 32
layers = 1
context_width = 8

[schedule]
steps = 20
beta_start = 0.001
beta_end = 0.2

[data]
frames = 16
context_width = 8

[data.audio]
channels = 8

[train_main]
steps = 4

[train_control]
steps = 4

[eval]
samples_per_text = 2
"#;

fn mcm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mcm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let (data, main, dual) = (d.join("data"), d.join("main.ckpt"), d.join("dual.ckpt"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train-main", "--config", s(&cfg), "--data", s(&data), "--out", s(&main)]);
    let log = std::fs::read_to_string(d.join("main.ckpt.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    ok(&["train-control", "--config", s(&cfg), "--data", s(&data), "--main", s(&main), "--out", s(&dual)]);
    ok(&["finetune-single", "--config", s(&cfg), "--data", s(&data), "--main", s(&main), "--out", s(&d.join("single.ckpt"))]);

    let audio = data.join("audio/0001.txt");
    let sample = |name: &str, extra: &[&str]| {
        let out = d.join(name);
        let mut args = vec!["sample", "--checkpoint", s(&dual), "--text", "a person dances", "--frames", "16", "--seed", "4", "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        std::fs::read(out).unwrap()
    };
    let a = sample("a.mot", &["--audio", s(&audio)]);
    let b = sample("b.mot", &["--audio", s(&audio), "--sequential"]);
    assert_eq!(a, b);
    let json = d.join("pos.json");
    sample("c.mot", &["--positions", s(&json)]);
    assert!(json.exists());

    let kv = ok(&["evaluate", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&dual), "--json", s(&d.join("r.json"))]);
    assert!(kv.contains("fid_k="));
    assert!(kv.contains("r_precision_top1=absent"));
    let gt = ok(&["evaluate", "--config", s(&cfg), "--data", s(&data)]);
    assert!(gt.lines().any(|l| l.starts_with("config_hash=")));

    let table = ok(&["ablate", "--config", s(&cfg), "--data", s(&data), "--grid", "T/CA/F,mcm,finetune"]);
    let rows: Vec<&str> = table.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(rows, ["T/CA/F", "mcm", "finetune"]);

    let csv = d.join("m.csv");
    ok(&["export", "--motion", s(&d.join("a.mot")), "--csv", s(&csv)]);
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 17);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(mcm(&["no-such-verb"]).status.code(), Some(1));
    assert_eq!(mcm(&["sample"]).status.code(), Some(1));
    assert_eq!(mcm(&["--help"]).status.code(), Some(0));

    let bad = d.join("bad.toml");
    std::fs::write(&bad, "[data]\nframes = 500\n").unwrap();
    assert_eq!(mcm(&["gen-data", "--config", s(&bad), "--out", s(&d.join("x"))]).status.code(), Some(1));

    let missing = d.join("missing");
    assert_eq!(mcm(&["train-main", "--data", s(&missing), "--out", s(&d.join("m"))]).status.code(), Some(2));

    let junk = d.join("junk.ckpt");
    std::fs::write(&junk, b"junk").unwrap();
    let out = mcm(&["sample", "--checkpoint", s(&junk), "--text", "walk", "--out", s(&d.join("o.mot"))]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = d.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = d.join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let main = d.join("main.ckpt");
    ok(&["train-main", "--config", s(&cfg), "--data", s(&data), "--out", s(&main)]);
    let long = mcm(&["sample", "--checkpoint", s(&main), "--text", "walk", "--frames", "197", "--out", s(&d.join("o.mot"))]);
    assert_eq!(long.status.code(), Some(1));
    let grid = mcm(&["ablate", "--config", s(&cfg), "--data", s(&data), "--grid", "T/Q"]);
    assert_eq!(grid.status.code(), Some(1));
}

#[test]
fn same_config_and_seed_reproduce_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&d.join("a"))]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&d.join("b"))]);
    ok(&["gen-data", "--config", s(&cfg), "--seed", "99", "--out", s(&d.join("c"))]);
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/motions/0003.mot"), read("b/motions/0003.mot"));
    assert_eq!(read("a/index.json"), read("b/index.json"));
    assert_ne!(read("a/motions/0003.mot"), read("c/motions/0003.mot"));
}
