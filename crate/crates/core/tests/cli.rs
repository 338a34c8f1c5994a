use std::path::Path;
use std::process::{Command, Output};

use fghash::config::Config;
use fghash::retrieval::CodeDatabase;

fn fghash(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fghash"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY: &[&str] = &[
    "input_size=32",
    "trunk=8:4:4:0,8:3:2:1",
    "extra=8:3:2:1,8:3:2:1",
    "anchor_sizes=8,12,24",
    "fusion_dim=8",
    "code_bits=16",
    "batch_size=8",
    "epochs=2",
    "warmup_epochs=1",
];

fn train_toy(dir: &Path) {
    let mut args = vec!["train".to_string(), s(&dir.join("train.cfg")).to_string()];
    for kv in TOY {
        args.push("--set".into());
        args.push(kv.to_string());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&fghash(&args));
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    let out = ok(&fghash(&[
        "synth",
        s(&dir),
        "--train-per-class",
        "4",
        "--query-per-class",
        "2",
        "--canvas",
        "64",
        "--glyph",
        "12",
    ]));
    assert!(out.contains("images 24"));
    train_toy(&dir);
    let ckpt = dir.join("model.ckpt");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let manifest = dir.join("manifest.csv");
    let (db, q) = (dir.join("db.codes"), dir.join("q.codes"));
    for (split, out) in [("train", &db), ("query", &q)] {
        ok(&fghash(&[
            "encode",
            "--checkpoint",
            s(&ckpt),
            "--manifest",
            s(&manifest),
            "--split",
            split,
            "--out",
            s(out),
        ]));
    }
    assert_eq!(CodeDatabase::load(&db).unwrap().len(), 16);

    let stem = dir.join("metrics");
    let first = ok(&fghash(&["eval", "--db", s(&db), "--queries", s(&q), "--out", s(&stem)]));
    let again = ok(&fghash(&[
        "eval",
        "--db",
        s(&db),
        "--manifest",
        s(&manifest),
        "--split",
        "query",
        "--checkpoint",
        s(&ckpt),
    ]));
    assert_eq!(first, again);
    let json: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert!(json["map"].as_f64().unwrap() > 0.0);
    assert!(std::fs::read_to_string(stem.with_extension("csv")).unwrap().starts_with("series,x,y"));

    let image = dir.join("images/query_0000.png");
    let hits = ok(&fghash(&[
        "query",
        "--checkpoint",
        s(&ckpt),
        "--db",
        s(&db),
        s(&image),
        "-k",
        "3",
        "--format",
        "json",
    ]));
    let hits: serde_json::Value = serde_json::from_str(&hits).unwrap();
    assert_eq!(hits.as_array().unwrap().len(), 3);

    let boxes = dir.join("boxes.csv");
    let csv = ok(&fghash(&["locate", "--checkpoint", s(&ckpt), s(&image), "--boxes", s(&boxes)]));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].ends_with(",iou"));
    let json = ok(&fghash(&["locate", "--checkpoint", s(&ckpt), s(&image), "--format", "json"]));
    let json: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(json["regions"].as_array().unwrap().len(), 3);
}

#[test]
fn same_seed_gives_identical_code_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&fghash(&[
        "synth",
        s(dir),
        "--train-per-class",
        "3",
        "--query-per-class",
        "1",
        "--canvas",
        "48",
        "--glyph",
        "8",
    ]));
    let mut files = Vec::new();
    for run in 0..2 {
        train_toy(dir);
        let out = dir.join(format!("run{run}.codes"));
        ok(&fghash(&[
            "encode",
            "--checkpoint",
            s(&dir.join("model.ckpt")),
            "--manifest",
            s(&dir.join("manifest.csv")),
            "--out",
            s(&out),
        ]));
        files.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn errors_are_one_machine_readable_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "epochs = 3\nlearning_rat = 0.1\n").unwrap();
    let out = fghash(&["train", s(&bad)]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error kind=unknown_key "));
    assert!(err.contains("learning_rat"));

    let cfg = tmp.path().join("nomanifest.cfg");
    std::fs::write(&cfg, "manifest = missing.csv\n").unwrap();
    let err = String::from_utf8(fghash(&["train", s(&cfg)]).stderr).unwrap();
    assert!(err.contains("missing.csv"), "{err}");
}

#[test]
fn synth_config_parses_back() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&fghash(&["synth", s(tmp.path()), "--train-per-class", "2", "--query-per-class", "1", "--canvas", "48", "--glyph", "8"]));
    let cfg = Config::load(&tmp.path().join("train.cfg")).unwrap();
    assert_eq!(cfg.manifest.as_deref(), Some(tmp.path().join("manifest.csv").as_path()));
    assert_eq!(cfg.train, Config::synthetic().train);
}

#[test]
fn help_lists_every_command() {
    let help = ok(&fghash(&["--help"]));
    for cmd in ["synth", "train", "encode", "eval", "query", "locate"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
}
