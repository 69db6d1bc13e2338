use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use treecaps::ast::{read_dataset, write_class_manifest, write_dataset, ClassManifest};
use treecaps::{AstNode, Sample, Tree, Vocabulary};

const SIX_CLASS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/six_class.json");

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_treecaps"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    Output {
        code: out.status.code().unwrap(),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert_eq!(out.code, 0, "{args:?}: {}", out.stderr);
    out.stdout
}

fn prepare(dir: &Path, name: &str, per_class: usize, seed: u64) -> PathBuf {
    ok(
        dir,
        &[
            "prepare",
            "--synthetic-spec",
            SIX_CLASS,
            "--samples-per-class",
            &per_class.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
            name,
        ],
    );
    dir.join(name)
}

const SMALL_MODEL: &str = r#""model": {"embed_dim": 8, "conv_dim": 8, "slices": 2, "primary_dim": 4,
    "routing": {"static_caps": 4}, "code_dim": 4}"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn small_config(dir: &Path, data: &str, ckpt: &str, extra: &str) -> PathBuf {
    write_config(
        dir,
        &format!("{ckpt}.json"),
        &format!(
            r#"{{"dataset": "{data}", "checkpoint_dir": "{ckpt}", {extra}
                "train": {{"epochs": 2, "batch_size": 8, {SMALL_MODEL}}}}}"#
        ),
    )
}

fn samples(path: &Path) -> Vec<Sample> {
    read_dataset(std::fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn prepare_is_reproducible_and_stratified() {
    let dir = tempfile::tempdir().unwrap();
    let a = prepare(dir.path(), "a", 20, 42);
    let b = prepare(dir.path(), "b", 20, 42);
    for f in [
        "train.jsonl",
        "val.jsonl",
        "test.jsonl",
        "vocab.json",
        "classes.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = prepare(dir.path(), "c", 20, 43);
    assert_ne!(
        std::fs::read(a.join("train.jsonl")).unwrap(),
        std::fs::read(c.join("train.jsonl")).unwrap()
    );
    for (file, expected) in [("train.jsonl", 16), ("val.jsonl", 2), ("test.jsonl", 2)] {
        let s = samples(&a.join(file));
        for class in 0..6 {
            assert_eq!(
                s.iter().filter(|x| x.label == class).count(),
                expected,
                "{file} class {class}"
            );
        }
    }
}

#[test]
fn prepare_reports_corrupt_line() {
    let dir = tempfile::tempdir().unwrap();
    let good = r#"{"label": 0, "tree": {"type": "Module", "children": []}}"#;
    let mut lines = vec![good.to_string(); 30];
    lines[16] = r#"{"label": 0, "tree": {"type": "Module", "children": ["#.to_string();
    std::fs::write(dir.path().join("in.jsonl"), lines.join("\n")).unwrap();
    let out = run(
        dir.path(),
        &["prepare", "--input", "in.jsonl", "--out", "data"],
    );
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("line 17"), "{}", out.stderr);
    assert!(!dir.path().join("data").exists());
}

#[test]
fn prepare_needs_exactly_one_source() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["prepare", "--out", "x"]).code, 2);
    let both = run(
        dir.path(),
        &[
            "prepare",
            "--input",
            "a.jsonl",
            "--synthetic-spec",
            SIX_CLASS,
            "--out",
            "x",
        ],
    );
    assert_eq!(both.code, 2);
    let bad_split = run(
        dir.path(),
        &[
            "prepare",
            "--synthetic-spec",
            SIX_CLASS,
            "--split",
            "0.5,0.5",
            "--out",
            "x",
        ],
    );
    assert_eq!(bad_split.code, 2);
}

#[test]
fn pretrained_embeddings_round_trip_into_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(dir.path(), "data", 10, 1);
    ok(
        dir.path(),
        &[
            "pretrain", "--data", "data", "--dim", "8", "--epochs", "2", "--out", "emb.txt",
        ],
    );
    let text = std::fs::read_to_string(dir.path().join("emb.txt")).unwrap();
    let vocab = Vocabulary::load(&data.join("vocab.json")).unwrap();
    assert_eq!(text.lines().next().unwrap(), format!("{} 8", vocab.len()));

    ok(
        dir.path(),
        &[
            "pretrain", "--data", "data", "--dim", "8", "--epochs", "0", "--out", "init.txt",
        ],
    );
    assert_eq!(
        std::fs::read_to_string(dir.path().join("init.txt"))
            .unwrap()
            .lines()
            .count(),
        vocab.len() + 1
    );

    let cfg = small_config(dir.path(), "data", "ckpt", "");
    let out = run(
        dir.path(),
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--init-embeddings",
            "emb.txt",
        ],
    );
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert!(
        out.stderr.contains("(0 unknown tokens skipped)"),
        "{}",
        out.stderr
    );
}

#[test]
fn seeded_training_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "data", 10, 1);
    let cfg = small_config(dir.path(), "data", "ckpt", "");
    let cfg = cfg.to_str().unwrap();
    let csv = |out: &str| {
        ok(
            dir.path(),
            &[
                "train",
                "--config",
                cfg,
                "--seed",
                "9",
                "--checkpoint-dir",
                out,
            ],
        );
        (
            std::fs::read(dir.path().join(out).join("metrics-1.csv")).unwrap(),
            std::fs::read(dir.path().join(out).join("model-1.ckpt")).unwrap(),
        )
    };
    assert_eq!(csv("r1"), csv("r2"));
}

#[test]
fn invalid_configs_exit_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "data", 3, 1);
    let unknown = write_config(
        dir.path(),
        "u.json",
        r#"{"dataset": "data", "checkpoint_dir": "c", "epochz": 3}"#,
    );
    let out = run(
        dir.path(),
        &["train", "--config", unknown.to_str().unwrap()],
    );
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("epochz"), "{}", out.stderr);

    let bad = write_config(
        dir.path(),
        "b.json",
        r#"{"dataset": "missing", "checkpoint_dir": "c", "train": {"epochs": 0, "batch_size": 0}}"#,
    );
    let out = run(dir.path(), &["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.code, 2);
    for needle in ["epochs", "batch_size", "missing"] {
        assert!(out.stderr.contains(needle), "{needle}: {}", out.stderr);
    }
    assert!(!dir.path().join("c").exists());
}

fn report(dir: &Path, checkpoints: &str) -> Value {
    serde_json::from_str(&ok(
        dir,
        &[
            "evaluate",
            "--checkpoints",
            checkpoints,
            "--data",
            "data/test.jsonl",
        ],
    ))
    .unwrap()
}

fn accuracy_matches_confusion(ev: &Value) {
    let confusion: Vec<Vec<u64>> = serde_json::from_value(ev["confusion"].clone()).unwrap();
    let trace: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    let total: u64 = confusion.iter().flatten().sum();
    assert_eq!(
        ev["accuracy"].as_f64().unwrap(),
        trace as f64 / total as f64
    );
}

#[test]
fn evaluate_single_and_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "data", 10, 1);
    let cfg = small_config(dir.path(), "data", "ckpt", r#""ensemble_size": 3,"#);
    ok(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);

    let single = report(dir.path(), "ckpt/model-1.ckpt");
    assert_eq!(single["members"].as_array().unwrap().len(), 1);
    assert!(single.get("ensemble").is_none());
    accuracy_matches_confusion(&single["members"][0]["evaluation"]);

    let all = report(
        dir.path(),
        "ckpt/model-1.ckpt,ckpt/model-2.ckpt,ckpt/model-3.ckpt",
    );
    assert_eq!(all["members"].as_array().unwrap().len(), 3);
    accuracy_matches_confusion(&all["ensemble"]["evaluation"]);
    let weights: Vec<f64> = serde_json::from_value(all["ensemble"]["weights"].clone()).unwrap();
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let out = run(
        dir.path(),
        &[
            "evaluate",
            "--checkpoints",
            "ckpt/model-1.ckpt",
            "--data",
            "data/test.jsonl",
            "--out",
            "report.json",
        ],
    );
    assert_eq!(
        std::fs::read_to_string(dir.path().join("report.json")).unwrap(),
        out.stdout
    );
}

#[test]
fn evaluate_rejects_incompatible_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(dir.path(), "data", 5, 1);
    let mut all = Vec::new();
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        all.extend(samples(&data.join(f)));
    }
    std::fs::write(dir.path().join("all.jsonl"), write_dataset(&all)).unwrap();
    std::fs::write(dir.path().join("names.txt"), "a\nb\nc\nd\ne\nf\n").unwrap();
    ok(
        dir.path(),
        &[
            "prepare",
            "--input",
            "all.jsonl",
            "--classes",
            "names.txt",
            "--out",
            "other",
        ],
    );
    ok(
        dir.path(),
        &[
            "train",
            "--config",
            small_config(dir.path(), "data", "a", "").to_str().unwrap(),
        ],
    );
    ok(
        dir.path(),
        &[
            "train",
            "--config",
            small_config(dir.path(), "other", "b", "").to_str().unwrap(),
        ],
    );
    let out = run(
        dir.path(),
        &[
            "evaluate",
            "--checkpoints",
            "a/model-1.ckpt,b/model-1.ckpt",
            "--data",
            "data/test.jsonl",
        ],
    );
    assert_eq!(out.code, 2, "{}", out.stderr);
    let out = run(
        dir.path(),
        &[
            "evaluate",
            "--checkpoints",
            "data/vocab.json",
            "--data",
            "data/test.jsonl",
        ],
    );
    assert_eq!(out.code, 2);
}

fn tree(node: &AstNode) -> Tree {
    Tree::from_ast(node, 100).unwrap()
}

#[test]
fn memorizing_model_predicts_its_training_classes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    let a = AstNode::with_children("For", vec![AstNode::leaf("Name"), AstNode::leaf("Body")]);
    let b = AstNode::with_children(
        "If",
        vec![AstNode::with_children(
            "Compare",
            vec![AstNode::leaf("Name")],
        )],
    );
    let set = vec![
        Sample {
            tree: tree(&a),
            label: 0,
        },
        Sample {
            tree: tree(&b),
            label: 1,
        },
    ];
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        std::fs::write(data.join(f), write_dataset(&set)).unwrap();
    }
    Vocabulary::build(&set)
        .save(&data.join("vocab.json"))
        .unwrap();
    write_class_manifest(
        &data.join("classes.json"),
        &ClassManifest::from_names(["loop".into(), "branch".into()]),
    )
    .unwrap();
    let cfg = write_config(
        dir.path(),
        "mem.json",
        r#"{"dataset": "data", "checkpoint_dir": "ckpt",
            "train": {"epochs": 300, "lr_decay": 1.0, "batch_size": 1}}"#,
    );
    ok(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);

    for (node, name) in [(&a, "loop"), (&b, "branch")] {
        std::fs::write(dir.path().join("t.json"), tree(node).to_json()).unwrap();
        let pred: Value = serde_json::from_str(&ok(
            dir.path(),
            &[
                "predict",
                "--checkpoint",
                "ckpt/model-1.ckpt",
                "--tree",
                "t.json",
            ],
        ))
        .unwrap();
        assert_eq!(pred["class"], name);
        let total: f64 = pred["probabilities"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p["probability"].as_f64().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    let unseen = AstNode::with_children("Lambda", vec![AstNode::leaf("Yield")]);
    std::fs::write(dir.path().join("u.json"), tree(&unseen).to_json()).unwrap();
    ok(
        dir.path(),
        &[
            "predict",
            "--checkpoint",
            "ckpt/model-1.ckpt",
            "--tree",
            "u.json",
        ],
    );

    std::fs::write(dir.path().join("bad.json"), "{\"type\": ").unwrap();
    let out = run(
        dir.path(),
        &[
            "predict",
            "--checkpoint",
            "ckpt/model-1.ckpt",
            "--tree",
            "bad.json",
        ],
    );
    assert_eq!(out.code, 2);
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn sweep_emits_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "data", 5, 1);
    let cfg = small_config(dir.path(), "data", "ckpt", "");
    let cfg = cfg.to_str().unwrap();
    ok(
        dir.path(),
        &[
            "sweep",
            "--config",
            cfg,
            "--param",
            "D_cc",
            "--values",
            "4,8,12,16",
            "--trials",
            "2",
            "--out",
            "s.csv",
        ],
    );
    let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "param,value,trials,failed,mean_accuracy,std_accuracy"
    );
    let rows = csv_rows(&text);
    assert_eq!(
        rows.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(),
        ["4", "8", "12", "16"]
    );

    let single = ok(
        dir.path(),
        &[
            "sweep",
            "--config",
            cfg,
            "--param",
            "variant",
            "--values",
            "standard,dmp-ablation",
            "--trials",
            "1",
        ],
    );
    for row in csv_rows(&single) {
        assert_eq!(row[3], "0");
        assert_eq!(row[5], "0");
    }

    let out = run(
        dir.path(),
        &[
            "sweep",
            "--config",
            cfg,
            "--param",
            "model.nope",
            "--values",
            "1",
            "--trials",
            "1",
        ],
    );
    assert_eq!(out.code, 2);
    let out = run(
        dir.path(),
        &[
            "sweep", "--config", cfg, "--param", "D_cc", "--values", "0", "--trials", "1",
        ],
    );
    assert_eq!(out.code, 2);
}

#[test]
fn default_config_learns_synthetic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "data", 200, 42);
    let cfg = write_config(
        dir.path(),
        "exp.json",
        r#"{"dataset": "data", "checkpoint_dir": "ckpt"}"#,
    );
    let out = ok(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    let acc: f64 = out.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(acc >= 0.95, "{out}");
    assert!(dir.path().join("ckpt/metrics-1.csv").exists());
}

#[test]
fn shipped_config_parses() {
    let dir = tempfile::tempdir().unwrap();
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/six_class.json");
    let out = run(dir.path(), &["train", "--config", config, "--epochs", "0"]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("epochs must be at least 1"), "{}", out.stderr);
    assert!(!out.stderr.contains("unknown field"), "{}", out.stderr);
}
