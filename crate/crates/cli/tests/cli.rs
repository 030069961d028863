use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scenecheck::corpus::load_scenes;
use scenecheck::eval::{auc, Metrics, ScoredSet};
use scenecheck::model::load_checkpoint;
use scenecheck::scene_lang::{tokenize, TokenSequence, Vocabulary};
use scenecheck::scorer::{SceneScorer, Variant};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenecheck")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// synth -> train -> attack -> score -> eval in `root`; returns the
/// directory of each stage.
struct Pipeline {
    synth: PathBuf,
    train: PathBuf,
    attack: PathBuf,
    eval: PathBuf,
    score: Vec<PathBuf>,
}

fn pipeline(root: &Path) -> Pipeline {
    let d = |s: &str| root.join(s);
    let pl = Pipeline {
        synth: d("synth"),
        train: d("train"),
        attack: d("attack"),
        eval: d("eval"),
        score: ["misclassification", "hiding", "appearing"].iter().map(|t| d(&format!("score_{t}"))).collect(),
    };
    ok(&["synth", "--n-scenes", "400", "--seed", "3", "--out", p(&pl.synth)]);
    let vocab = pl.synth.join("vocab.json");
    ok(&[
        "train",
        "--corpus",
        p(&pl.synth.join("scenes.jsonl")),
        "--vocab",
        p(&vocab),
        "--epochs",
        "2",
        "--layers",
        "1",
        "--heads",
        "2",
        "--hidden",
        "16",
        "--ffn",
        "32",
        "--max-seq-len",
        "8",
        "--seed",
        "4",
        "--out",
        p(&pl.train),
    ]);
    ok(&[
        "attack",
        "--corpus",
        p(&pl.train.join("eval.jsonl")),
        "--vocab",
        p(&vocab),
        "--pool",
        "cross-theme",
        "--world",
        p(&pl.synth.join("world.json")),
        "--count",
        "30",
        "--seed",
        "5",
        "--out",
        p(&pl.attack),
    ]);
    for (t, dir) in ["misclassification", "hiding", "appearing"].iter().zip(&pl.score) {
        ok(&[
            "score",
            "--benign",
            p(&pl.train.join("eval.jsonl")),
            "--attacks",
            p(&pl.attack.join(format!("attacks_{t}.jsonl"))),
            "--vocab",
            p(&vocab),
            "--checkpoint",
            p(&pl.train.join("model.ckpt")),
            "--out",
            p(dir),
        ]);
    }
    let mut args = vec!["eval", "--out", p(&pl.eval), "--runs"];
    args.extend(pl.score.iter().map(|d| p(d)));
    ok(&args);
    pl
}

#[test]
fn vocab_presets_report_token_counts() {
    let dir = tempfile::tempdir().unwrap();
    let voc = ok(&["vocab", "--voc", "--grid", "3x3", "--out", p(&dir.path().join("voc"))]);
    assert!(voc.contains("180 object tokens"), "{voc}");
    let coco = ok(&["vocab", "--coco", "--grid", "3x3", "--out", p(&dir.path().join("coco"))]);
    assert!(coco.contains("720 object tokens"), "{coco}");
    let v = Vocabulary::load(dir.path().join("coco/vocab.json")).unwrap();
    assert_eq!(v.n_categories(), 80);

    let bad = run(&["vocab", "--voc", "--grid", "0x3", "--out", p(dir.path())]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("usage"));
}

#[test]
fn end_to_end_pipeline_and_eval_reproduces_in_process_auc() {
    let dir = tempfile::tempdir().unwrap();
    let before = std::fs::read(dir.path().join("synth/scenes.jsonl")).ok();
    let pl = pipeline(dir.path());
    assert!(before.is_none());
    let metrics: Metrics = serde_json::from_slice(&std::fs::read(pl.eval.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.results.len(), 3);
    for f in ["train_manifest.json", "model.ckpt", "loss.csv", "table.json", "eval.jsonl"] {
        assert!(pl.train.join(f).exists(), "{f}");
    }
    let roc = std::fs::read_to_string(pl.eval.join("roc_misclassification_scene-bert-strict.csv")).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr\n"));

    // Recompute one AUC entirely in-process.
    let vocab = Vocabulary::load(pl.synth.join("vocab.json")).unwrap();
    let params = load_checkpoint(pl.train.join("model.ckpt")).unwrap();
    let scorer = SceneScorer::new(&params, &vocab).unwrap();
    let score = |scenes: Vec<TokenSequence>| -> Vec<f64> {
        scenes.iter().map(|t| scorer.score(t, Variant::Strict, scorer.full_k()).unwrap().score).collect()
    };
    let benign: Vec<TokenSequence> = load_scenes(pl.train.join("eval.jsonl"), &vocab)
        .unwrap()
        .iter()
        .map(|s| tokenize(&s.sentence, &vocab).unwrap())
        .collect();
    let text = std::fs::File::open(pl.attack.join("attacks_misclassification.jsonl")).unwrap();
    let records = scenecheck::attacks::read_attacks(std::io::BufReader::new(text), &vocab).unwrap();
    let attacked: Vec<TokenSequence> = records.iter().map(|r| tokenize(&r.attacked, &vocab).unwrap()).collect();
    let expected = auc(&ScoredSet::new(score(benign), score(attacked))).unwrap();
    assert_eq!(metrics.auc_of("misclassification", "scene-bert-strict"), Some(expected));
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (pa, pb) = (pipeline(a.path()), pipeline(b.path()));
    let same = |x: PathBuf, y: PathBuf| assert_eq!(std::fs::read(&x).unwrap(), std::fs::read(&y).unwrap(), "{x:?}");
    same(pa.train.join("model.ckpt"), pb.train.join("model.ckpt"));
    for t in ["misclassification", "hiding", "appearing"] {
        let f = format!("attacks_{t}.jsonl");
        same(pa.attack.join(&f), pb.attack.join(&f));
    }
    same(pa.eval.join("metrics.json"), pb.eval.join("metrics.json"));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("s");
    ok(&["synth", "--n-scenes", "50", "--out", p(&synth)]);
    let missing = dir.path().join("nowhere/model.ckpt");
    let out = run(&[
        "score",
        "--benign",
        p(&synth.join("scenes.jsonl")),
        "--attacks",
        p(&synth.join("scenes.jsonl")),
        "--vocab",
        p(&synth.join("vocab.json")),
        "--checkpoint",
        p(&missing),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&missing)));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 9, "synth": {"n_scenes": 120, "max_objects": 4}}"#).unwrap();
    let synth = dir.path().join("s");
    ok(&["synth", "--config", p(&cfg), "--n-scenes", "80", "--out", p(&synth)]);
    let lines = std::fs::read_to_string(synth.join("scenes.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 80);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(synth.join("synth_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 9);
    assert_eq!(manifest["config"]["synth"]["n_scenes"], 80);
    assert_eq!(manifest["config"]["synth"]["max_objects"], 4);

    std::fs::write(&cfg, r#"{"synth": {"scenes": 3}}"#).unwrap();
    let bad = run(&["synth", "--config", p(&cfg), "--out", p(&synth)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn commands_do_not_modify_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("s");
    ok(&["synth", "--n-scenes", "60", "--out", p(&synth)]);
    let files = ["scenes.jsonl", "vocab.json", "world.json"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(synth.join(f)).unwrap()).collect();
    ok(&[
        "attack",
        "--corpus",
        p(&synth.join("scenes.jsonl")),
        "--vocab",
        p(&synth.join("vocab.json")),
        "--pool",
        "in-theme-off-home",
        "--world",
        p(&synth.join("world.json")),
        "--type",
        "misclassification",
        "--count",
        "10",
        "--out",
        p(&dir.path().join("a")),
    ]);
    let after: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(synth.join(f)).unwrap()).collect();
    assert_eq!(before, after);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a/attack_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"]["corpus"]["sha256"].as_str().unwrap().len(), 64);
}
