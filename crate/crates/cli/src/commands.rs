use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scenecheck::attacks::{generate_attack_set, read_attacks, write_attacks, AttackType, CategoryPool};
use scenecheck::baselines::{
    bayes_oracle_confidences, cooccurrence_supports, fit_counts, unigram_confidences, BaselineError, CooccurrenceTable,
};
use scenecheck::corpus::{
    filter_min_objects, generate_synthetic_scenes, import_coco, load_scenes, split, write_scenes, Scene,
    SyntheticWorldSpec,
};
use scenecheck::eval::{report, EvalEntry, ScoredSet};
use scenecheck::model::{
    load_checkpoint, masked_nll, save_checkpoint, train as train_model, ModelConfig, ModelParameters, OptimizerState,
    TrainOptions,
};
use scenecheck::scene_lang::{tokenize, GridSpec, TokenSequence, Vocabulary};
use scenecheck::scorer::{read_report_lines, write_report_lines, PositionScore, ReportLine, SceneScorer, Variant};

use crate::config::RunConfig;
use crate::failure::{Failure, Kind};
use crate::presets::{COCO_CATEGORIES, VOC_CATEGORIES};
use crate::{AttackArgs, EvalArgs, ImportArgs, ScoreArgs, Shared, SynthArgs, TrainArgs, VocabArgs};

/// Overwrites a config field when the matching flag was given.
macro_rules! flag {
    ($field:expr, $flag:expr) => {
        if let Some(v) = $flag.clone() {
            $field = v;
        }
    };
}

#[derive(Serialize)]
struct InputFile {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
    inputs: BTreeMap<String, InputFile>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(Failure::io("cli", path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(Failure::io("cli", path))
}

fn read_json<T: for<'de> Deserialize<'de>>(module: &'static str, path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(Failure::io(module, path))?;
    serde_json::from_str(&text).map_err(|e| Failure::new(Kind::Data, module, format!("{}: {e}", path.display())))
}

/// Writes `<command>_manifest.json` with the resolved config and the hash of
/// every input file.
fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[(&str, &Path)],
    outputs: &[&str],
) -> Result<(), Failure> {
    let mut hashed = BTreeMap::new();
    for (role, path) in inputs {
        hashed.insert(role.to_string(), InputFile { path: path.display().to_string(), sha256: sha256_file(path)? });
    }
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        inputs: hashed,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join(format!("{command}_manifest.json")), &manifest)
}

fn out_dir(shared: &Shared) -> Result<PathBuf, Failure> {
    let dir = shared.out.clone().ok_or_else(|| Failure::usage("--out is required"))?;
    std::fs::create_dir_all(&dir).map_err(Failure::io("cli", &dir))?;
    Ok(dir)
}

fn vocab_path(shared: &Shared) -> Result<&Path, Failure> {
    shared.vocab.as_deref().ok_or_else(|| Failure::usage("--vocab is required"))
}

fn load_vocab(path: &Path) -> Result<Vocabulary, Failure> {
    if !path.exists() {
        return Err(Failure::new(Kind::Io, "scene_lang", format!("{}: vocabulary file not found", path.display())));
    }
    Vocabulary::load(path).map_err(|e| Failure::new(Kind::Data, "scene_lang", format!("{}: {e}", path.display())))
}

fn parse_grid(s: &str) -> Result<GridSpec, Failure> {
    s.parse::<GridSpec>().map_err(|e| Failure::usage(format!("--grid {s}: {e}")))
}

fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<Scene>, Failure> {
    load_scenes(path, vocab).map_err(|e| {
        let kind = if matches!(e, scenecheck::corpus::CorpusError::Io { .. }) { Kind::Io } else { Kind::Data };
        Failure::new(kind, "corpus", format!("{}: {e}", path.display()))
    })
}

fn load_world(path: Option<&Path>) -> Result<SyntheticWorldSpec, Failure> {
    let path = path.ok_or_else(|| Failure::usage("this pool/scorer needs --world world.json"))?;
    let world: SyntheticWorldSpec = read_json("corpus", path)?;
    world.validate().map_err(Failure::of(Kind::Data, "corpus"))?;
    Ok(world)
}

pub fn vocab(shared: &Shared, mut cfg: RunConfig, a: VocabArgs) -> Result<(), Failure> {
    flag!(cfg.grid, a.grid);
    let grid = parse_grid(&cfg.grid)?;
    let names: Vec<String> = if a.voc {
        VOC_CATEGORIES.iter().map(|s| s.to_string()).collect()
    } else if a.coco {
        COCO_CATEGORIES.iter().map(|s| s.to_string()).collect()
    } else {
        let path = a.categories.as_deref().expect("clap enforces one source");
        let text = std::fs::read_to_string(path).map_err(Failure::io("scene_lang", path))?;
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
    };
    let vocab = Vocabulary::new(names, grid).map_err(Failure::of(Kind::Usage, "scene_lang"))?;
    let out = out_dir(shared)?;
    vocab.save(out.join("vocab.json")).map_err(Failure::of(Kind::Io, "scene_lang"))?;
    let inputs: Vec<(&str, &Path)> = a.categories.as_deref().map(|p| ("categories", p)).into_iter().collect();
    write_manifest(&out, "vocab", &cfg, &inputs, &["vocab.json"])?;
    println!(
        "{} categories on a {} grid: {} object tokens, vocabulary size {}",
        vocab.n_categories(),
        grid,
        vocab.n_object_tokens(),
        vocab.size()
    );
    Ok(())
}

pub fn import(shared: &Shared, mut cfg: RunConfig, a: ImportArgs) -> Result<(), Failure> {
    flag!(cfg.grid, a.grid);
    let grid = parse_grid(&cfg.grid)?;
    let out = out_dir(shared)?;
    let scenes_path = out.join("scenes.jsonl");
    let imported = import_coco(&a.coco_json, &scenes_path).map_err(|e| {
        let kind = if matches!(e, scenecheck::corpus::CorpusError::Io { .. }) { Kind::Io } else { Kind::Data };
        Failure::new(kind, "corpus", format!("{}: {e}", a.coco_json.display()))
    })?;
    let vocab = Vocabulary::new(imported.categories, grid).map_err(Failure::of(Kind::Data, "scene_lang"))?;
    vocab.save(out.join("vocab.json")).map_err(Failure::of(Kind::Io, "scene_lang"))?;
    let scenes = load_corpus(&scenes_path, &vocab)?;
    let n_objects: usize = scenes.iter().map(|s| s.sentence.len()).sum();
    write_manifest(&out, "import", &cfg, &[("coco_json", &a.coco_json)], &["scenes.jsonl", "vocab.json"])?;
    println!(
        "imported {} scenes ({} objects, {} categories) into {}",
        scenes.len(),
        n_objects,
        vocab.n_categories(),
        scenes_path.display()
    );
    Ok(())
}

pub fn synth(shared: &Shared, mut cfg: RunConfig, a: SynthArgs) -> Result<(), Failure> {
    flag!(cfg.grid, a.grid);
    flag!(cfg.synth.n_scenes, a.n_scenes);
    flag!(cfg.synth.n_themes, a.n_themes);
    flag!(cfg.synth.group_size, a.group_size);
    flag!(cfg.synth.home_prob, a.home_prob);
    flag!(cfg.synth.min_objects, a.min_objects);
    flag!(cfg.synth.max_objects, a.max_objects);
    let s = &cfg.synth;
    let world = SyntheticWorldSpec {
        n_themes: s.n_themes,
        group_size: s.group_size,
        grid: parse_grid(&cfg.grid)?,
        home_prob: s.home_prob,
        min_objects: s.min_objects,
        max_objects: s.max_objects,
        seed: cfg.seed,
    };
    let scenes = generate_synthetic_scenes(&world, s.n_scenes).map_err(Failure::of(Kind::Usage, "corpus"))?;
    let vocab = world.vocabulary();
    let out = out_dir(shared)?;
    write_scenes(out.join("scenes.jsonl"), &scenes, &vocab).map_err(Failure::of(Kind::Io, "corpus"))?;
    vocab.save(out.join("vocab.json")).map_err(Failure::of(Kind::Io, "scene_lang"))?;
    write_json(&out.join("world.json"), &world)?;
    write_manifest(&out, "synth", &cfg, &[], &["scenes.jsonl", "vocab.json", "world.json"])?;
    println!(
        "sampled {} scenes from {} themes x {} categories on a {} grid",
        scenes.len(),
        world.n_themes,
        world.group_size,
        world.grid
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    n_scenes: usize,
    n_dropped: usize,
    n_train: usize,
    n_eval: usize,
    n_truncated: usize,
    steps: u64,
    final_loss: Option<f64>,
    heldout_nll: Option<f64>,
    param_count: usize,
}

pub fn train(shared: &Shared, mut cfg: RunConfig, a: TrainArgs) -> Result<(), Failure> {
    flag!(cfg.train.epochs, a.epochs);
    flag!(cfg.train.batch_size, a.batch_size);
    flag!(cfg.train.lr, a.lr);
    flag!(cfg.train.train_fraction, a.train_fraction);
    flag!(cfg.train.min_objects, a.min_objects);
    flag!(cfg.model.n_layers, a.layers);
    flag!(cfg.model.n_heads, a.heads);
    flag!(cfg.model.hidden_dim, a.hidden);
    flag!(cfg.model.ffn_dim, a.ffn);
    flag!(cfg.model.max_seq_len, a.max_seq_len);
    flag!(cfg.model.dropout_prob, a.dropout);
    let vpath = vocab_path(shared)?;
    let vocab = load_vocab(vpath)?;
    let scenes = load_corpus(&a.corpus, &vocab)?;
    let n_scenes = scenes.len();
    let kept = filter_min_objects(scenes, cfg.train.min_objects);
    let n_dropped = n_scenes - kept.len();
    let (train_set, eval_set) =
        split(kept, cfg.train.train_fraction, cfg.seed).map_err(Failure::of(Kind::Usage, "corpus"))?;
    if train_set.is_empty() {
        return Err(Failure::new(Kind::Data, "corpus", "no training scenes left after filtering and splitting"));
    }

    let m = &cfg.model;
    let model_cfg = ModelConfig {
        n_layers: m.n_layers,
        n_heads: m.n_heads,
        hidden_dim: m.hidden_dim,
        ffn_dim: m.ffn_dim,
        max_seq_len: m.max_seq_len,
        vocab_size: vocab.size(),
        dropout_prob: m.dropout_prob,
        seed: cfg.seed,
    };
    let mut params = ModelParameters::<f32>::init(&model_cfg).map_err(Failure::of(Kind::Usage, "model"))?;
    let mut opt = OptimizerState::adam(&params).with_lr(cfg.train.lr);
    let tokens: Vec<TokenSequence> = train_set
        .iter()
        .map(|s| tokenize(&s.sentence, &vocab))
        .collect::<Result<_, _>>()
        .map_err(Failure::of(Kind::Data, "scene_lang"))?;
    let opts = TrainOptions {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        seed: cfg.seed.wrapping_add(1),
        dropout: true,
    };
    let report_ = train_model(&mut params, &mut opt, &tokens, &opts).map_err(Failure::of(Kind::Model, "model"))?;

    let out = out_dir(shared)?;
    let ckpt = shared.checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"));
    save_checkpoint(&params, &ckpt).map_err(Failure::of(Kind::Io, "model"))?;
    let mut loss_csv = String::from("epoch,loss\n");
    for (i, l) in report_.epoch_losses.iter().enumerate() {
        loss_csv.push_str(&format!("{},{}\n", i + 1, l));
    }
    let loss_path = out.join("loss.csv");
    std::fs::write(&loss_path, loss_csv).map_err(Failure::io("model", &loss_path))?;
    write_scenes(out.join("train.jsonl"), &train_set, &vocab).map_err(Failure::of(Kind::Io, "corpus"))?;
    write_scenes(out.join("eval.jsonl"), &eval_set, &vocab).map_err(Failure::of(Kind::Io, "corpus"))?;
    let sentences: Vec<_> = train_set.iter().map(|s| s.sentence.clone()).collect();
    let table = fit_counts(&sentences, &vocab, cfg.train.alpha).map_err(Failure::of(Kind::Data, "baselines"))?;
    table.save(out.join("table.json")).map_err(Failure::of(Kind::Io, "baselines"))?;

    let heldout: Vec<TokenSequence> = eval_set
        .iter()
        .filter_map(|s| tokenize(&s.sentence, &vocab).ok())
        .filter(|t| !t.is_empty() && t.len() <= model_cfg.max_seq_len)
        .collect();
    let heldout_nll = if heldout.is_empty() {
        None
    } else {
        Some(masked_nll(&params, &heldout).map_err(Failure::of(Kind::Model, "model"))?)
    };
    let summary = TrainSummary {
        n_scenes,
        n_dropped,
        n_train: train_set.len(),
        n_eval: eval_set.len(),
        n_truncated: report_.truncated,
        steps: report_.steps,
        final_loss: report_.epoch_losses.last().copied(),
        heldout_nll,
        param_count: params.len(),
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    write_manifest(
        &out,
        "train",
        &cfg,
        &[("corpus", &a.corpus), ("vocab", vpath)],
        &["model.ckpt", "loss.csv", "train.jsonl", "eval.jsonl", "table.json", "train_summary.json"],
    )?;
    println!(
        "trained {} parameters on {} scenes ({} held out, {} dropped) for {} epochs; final loss {}, held-out masked NLL {}",
        params.len(),
        summary.n_train,
        summary.n_eval,
        n_dropped,
        cfg.train.epochs,
        summary.final_loss.map_or("n/a".into(), |l| format!("{l:.4}")),
        heldout_nll.map_or("n/a".into(), |l| format!("{l:.4}")),
    );
    Ok(())
}

fn parse_pool(name: &str, world: Option<&Path>, vocab: &Vocabulary) -> Result<CategoryPool, Failure> {
    let themed = |w: SyntheticWorldSpec| -> Result<SyntheticWorldSpec, Failure> {
        if w.n_categories() != vocab.n_categories() {
            return Err(Failure::new(
                Kind::Data,
                "attacks",
                format!("world has {} categories, vocabulary has {}", w.n_categories(), vocab.n_categories()),
            ));
        }
        Ok(w)
    };
    match name {
        "uniform" => Ok(CategoryPool::Uniform { n_categories: vocab.n_categories() }),
        "cross-theme" => Ok(CategoryPool::CrossTheme(themed(load_world(world)?)?)),
        "in-theme-off-home" => Ok(CategoryPool::InThemeOffHome(themed(load_world(world)?)?)),
        other => Err(Failure::usage(format!("unknown pool `{other}` (uniform, cross-theme, in-theme-off-home)"))),
    }
}

pub fn attack(shared: &Shared, mut cfg: RunConfig, a: AttackArgs) -> Result<(), Failure> {
    flag!(cfg.attack.attack_type, a.attack_type);
    flag!(cfg.attack.count, a.count);
    flag!(cfg.attack.pool, a.pool);
    let vpath = vocab_path(shared)?;
    let vocab = load_vocab(vpath)?;
    let scenes = load_corpus(&a.corpus, &vocab)?;
    let pool = parse_pool(&cfg.attack.pool, a.world.as_deref(), &vocab)?;
    let types: Vec<AttackType> = match cfg.attack.attack_type.as_str() {
        "all" => AttackType::ALL.to_vec(),
        t => vec![t.parse().map_err(Failure::usage)?],
    };
    let out = out_dir(shared)?;
    let mut outputs = Vec::new();
    for t in types {
        let records = generate_attack_set(&scenes, t, cfg.attack.count, cfg.seed, &pool, &vocab)
            .map_err(Failure::of(Kind::Attack, "attacks"))?;
        let name = format!("attacks_{t}.jsonl");
        let path = out.join(&name);
        let f = File::create(&path).map_err(Failure::io("attacks", &path))?;
        write_attacks(BufWriter::new(f), &records, &vocab).map_err(Failure::io("attacks", &path))?;
        println!("{t}: {} attacks ({} pool) -> {}", records.len(), pool.name(), path.display());
        outputs.push(name);
    }
    let mut inputs: Vec<(&str, &Path)> = vec![("corpus", &a.corpus), ("vocab", vpath)];
    if let Some(w) = a.world.as_deref() {
        inputs.push(("world", w));
    }
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    write_manifest(&out, "attack", &cfg, &inputs, &outputs)
}

/// What `score` wrote, read back by `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreMeta {
    /// Name used for this scorer in metrics.
    pub label: String,
    pub scorer: String,
    pub variant: Option<String>,
    pub k: Option<usize>,
    pub attack_type: String,
    pub n_benign: usize,
    pub n_attacked: usize,
    pub skipped_benign: usize,
    pub skipped_attacked: usize,
    pub input_sha256: BTreeMap<String, String>,
}

enum Scorer {
    Bert { params: ModelParameters<f32>, variant: Variant, k: Option<usize>, workers: usize },
    Unigram(CooccurrenceTable),
    Cooccurrence(CooccurrenceTable),
    Oracle(SyntheticWorldSpec),
}

fn line(scene: &Scene, variant: &str, tokens: &TokenSequence, confidences: Vec<f64>) -> ReportLine {
    let per_position: Vec<PositionScore> = tokens
        .as_slice()
        .iter()
        .zip(confidences)
        .enumerate()
        .map(|(i, (&token, confidence))| PositionScore { i, token, confidence })
        .collect();
    let score = per_position.iter().fold(1.0f64, |c, p| c.min(p.confidence));
    ReportLine { scene_id: scene.id.clone(), variant: variant.into(), k: None, score, per_position }
}

impl Scorer {
    /// Reports for every scorable scene plus the number skipped.
    fn run(&self, scenes: &[Scene], vocab: &Vocabulary, side: &str) -> Result<(Vec<ReportLine>, usize), Failure> {
        let tokens: Vec<TokenSequence> = scenes
            .iter()
            .map(|s| tokenize(&s.sentence, vocab))
            .collect::<Result<_, _>>()
            .map_err(Failure::of(Kind::Data, "scene_lang"))?;
        let mut lines = Vec::with_capacity(scenes.len());
        let mut skipped = 0;
        match self {
            Scorer::Bert { params, variant, k, workers } => {
                let scorer = SceneScorer::new(params, vocab).map_err(Failure::of(Kind::Data, "scorer"))?;
                let k = k.unwrap_or(scorer.full_k());
                let results =
                    scorer.score_batch(&tokens, *variant, k, *workers).map_err(Failure::of(Kind::Model, "scorer"))?;
                for (scene, r) in scenes.iter().zip(results) {
                    match r {
                        Ok(rep) => lines.push(rep.to_line(&scene.id)),
                        Err(e) => {
                            log::warn!("{side} scene {}: {e}; skipped", scene.id);
                            skipped += 1;
                        }
                    }
                }
            }
            Scorer::Unigram(table) => {
                for (scene, t) in scenes.iter().zip(&tokens) {
                    if t.is_empty() {
                        skipped += 1;
                        continue;
                    }
                    lines.push(line(scene, "unigram", t, unigram_confidences(table, t)));
                }
            }
            Scorer::Cooccurrence(table) => {
                for (scene, t) in scenes.iter().zip(&tokens) {
                    match cooccurrence_supports(table, &scene.sentence) {
                        Ok(c) => lines.push(line(scene, "cooccurrence", t, c)),
                        Err(BaselineError::TooShort(n)) => {
                            log::warn!("{side} scene {}: {n} words, co-occurrence needs 2; skipped", scene.id);
                            skipped += 1;
                        }
                        Err(e) => {
                            return Err(Failure::new(Kind::Data, "baselines", format!("scene {}: {e}", scene.id)))
                        }
                    }
                }
            }
            Scorer::Oracle(world) => {
                for (scene, t) in scenes.iter().zip(&tokens) {
                    if t.is_empty() {
                        skipped += 1;
                        continue;
                    }
                    lines.push(line(scene, "oracle", t, bayes_oracle_confidences(world, &scene.sentence)));
                }
            }
        }
        Ok((lines, skipped))
    }
}

fn load_table(path: Option<&Path>, vocab: &Vocabulary) -> Result<CooccurrenceTable, Failure> {
    let path = path.ok_or_else(|| Failure::usage("this scorer needs --table table.json"))?;
    let table = CooccurrenceTable::load(path)
        .map_err(|e| Failure::new(Kind::Data, "baselines", format!("{}: {e}", path.display())))?;
    if table.categories != vocab.categories() || table.grid != vocab.grid() {
        return Err(Failure::new(
            Kind::Data,
            "baselines",
            format!("{}: table does not match the vocabulary", path.display()),
        ));
    }
    Ok(table)
}

fn write_reports(path: &Path, lines: &[ReportLine]) -> Result<(), Failure> {
    let f = File::create(path).map_err(Failure::io("scorer", path))?;
    write_report_lines(BufWriter::new(f), lines).map_err(Failure::io("scorer", path))
}

pub fn score(shared: &Shared, mut cfg: RunConfig, a: ScoreArgs) -> Result<(), Failure> {
    flag!(cfg.score.scorer, a.scorer);
    flag!(cfg.score.variant, a.variant);
    flag!(cfg.score.workers, a.workers);
    if a.k.is_some() {
        cfg.score.k = a.k;
    }
    let vpath = vocab_path(shared)?;
    let vocab = load_vocab(vpath)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("vocab", vpath), ("benign", &a.benign), ("attacks", &a.attacks)];
    let (scorer, label, variant) = match cfg.score.scorer.as_str() {
        "scene-bert" => {
            let ckpt = shared.checkpoint.as_deref().ok_or_else(|| Failure::usage("scene-bert needs --checkpoint"))?;
            if !ckpt.exists() {
                return Err(Failure::new(Kind::Io, "model", format!("{}: checkpoint not found", ckpt.display())));
            }
            let params = load_checkpoint(ckpt).map_err(Failure::of(Kind::Model, "model"))?;
            let variant: Variant = cfg.score.variant.parse().map_err(Failure::usage)?;
            if cfg.score.k == Some(0) {
                return Err(Failure::usage("--k must be at least 1"));
            }
            inputs.push(("checkpoint", ckpt));
            let mut label = format!("scene-bert-{variant}");
            if let Some(k) = cfg.score.k {
                label.push_str(&format!("-top{k}"));
            }
            let scorer = Scorer::Bert { params, variant, k: cfg.score.k, workers: cfg.score.workers };
            (scorer, label, Some(variant.to_string()))
        }
        "unigram" | "cooccurrence" => {
            let table = load_table(a.table.as_deref(), &vocab)?;
            inputs.push(("table", a.table.as_deref().expect("checked by load_table")));
            let s = if cfg.score.scorer == "unigram" { Scorer::Unigram(table) } else { Scorer::Cooccurrence(table) };
            (s, cfg.score.scorer.clone(), None)
        }
        "oracle" => {
            let world = load_world(a.world.as_deref())?;
            inputs.push(("world", a.world.as_deref().expect("checked by load_world")));
            (Scorer::Oracle(world), "oracle".into(), None)
        }
        other => {
            return Err(Failure::usage(format!("unknown scorer `{other}` (scene-bert, unigram, cooccurrence, oracle)")))
        }
    };

    let benign = load_corpus(&a.benign, &vocab)?;
    let f = File::open(&a.attacks).map_err(Failure::io("attacks", &a.attacks))?;
    let records = read_attacks(BufReader::new(f), &vocab)
        .map_err(|e| Failure::new(Kind::Data, "attacks", format!("{}: {e}", a.attacks.display())))?;
    let kinds: HashSet<AttackType> = records.iter().map(|r| r.attack_type).collect();
    let attack_type = match kinds.len() {
        0 => return Err(Failure::new(Kind::Data, "attacks", format!("{}: no attack records", a.attacks.display()))),
        1 => records[0].attack_type.to_string(),
        _ => "mixed".into(),
    };
    let attacked: Vec<Scene> = records.into_iter().map(|r| Scene::new(r.scene_id, r.attacked)).collect();

    let (benign_lines, skipped_benign) = scorer.run(&benign, &vocab, "benign")?;
    let (attacked_lines, skipped_attacked) = scorer.run(&attacked, &vocab, "attacked")?;
    let out = out_dir(shared)?;
    write_reports(&out.join("benign_reports.jsonl"), &benign_lines)?;
    write_reports(&out.join("attacked_reports.jsonl"), &attacked_lines)?;
    let mut input_sha256 = BTreeMap::new();
    for (role, path) in &inputs {
        input_sha256.insert(role.to_string(), sha256_file(path)?);
    }
    let meta = ScoreMeta {
        label: label.clone(),
        scorer: cfg.score.scorer.clone(),
        variant,
        k: cfg.score.k,
        attack_type: attack_type.clone(),
        n_benign: benign_lines.len(),
        n_attacked: attacked_lines.len(),
        skipped_benign,
        skipped_attacked,
        input_sha256,
    };
    write_json(&out.join("score_meta.json"), &meta)?;
    write_manifest(
        &out,
        "score",
        &cfg,
        &inputs,
        &["benign_reports.jsonl", "attacked_reports.jsonl", "score_meta.json"],
    )?;
    println!(
        "{label} on {attack_type}: scored {} benign and {} attacked scenes ({} skipped)",
        benign_lines.len(),
        attacked_lines.len(),
        skipped_benign + skipped_attacked
    );
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<f64>, Failure> {
    let f = File::open(path).map_err(Failure::io("eval", path))?;
    let lines = read_report_lines(BufReader::new(f))
        .map_err(|e| Failure::new(Kind::Data, "eval", format!("{}: {e}", path.display())))?;
    Ok(lines.into_iter().map(|l| l.score).collect())
}

pub fn eval(shared: &Shared, cfg: RunConfig, a: EvalArgs) -> Result<(), Failure> {
    let mut entries = Vec::new();
    let mut metas = Vec::new();
    let mut seen = HashSet::new();
    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    for (i, dir) in a.runs.iter().enumerate() {
        let meta: ScoreMeta = read_json("eval", &dir.join("score_meta.json"))?;
        if !seen.insert((meta.attack_type.clone(), meta.label.clone())) {
            return Err(Failure::usage(format!(
                "{}: duplicate run for attack {} and scorer {}",
                dir.display(),
                meta.attack_type,
                meta.label
            )));
        }
        let benign_path = dir.join("benign_reports.jsonl");
        let attacked_path = dir.join("attacked_reports.jsonl");
        let set = ScoredSet::new(read_scores(&benign_path)?, read_scores(&attacked_path)?);
        inputs.push((format!("run{i}.benign"), benign_path));
        inputs.push((format!("run{i}.attacked"), attacked_path));
        entries.push(EvalEntry { attack: meta.attack_type.clone(), scorer: meta.label.clone(), set });
        metas.push(meta);
    }
    let out = out_dir(shared)?;
    let metadata = serde_json::json!({ "runs": metas });
    let metrics = report(&out, metadata, &entries).map_err(|e| {
        let kind = if matches!(e, scenecheck::eval::EvalError::Io { .. }) { Kind::Io } else { Kind::Eval };
        Failure::new(kind, "eval", e.to_string())
    })?;
    let inputs: Vec<(&str, &Path)> = inputs.iter().map(|(r, p)| (r.as_str(), p.as_path())).collect();
    write_manifest(&out, "eval", &cfg, &inputs, &["metrics.json"])?;
    for r in &metrics.results {
        println!(
            "{:<20} {:<28} AUC {:.4}  (benign {}, adversarial {})",
            r.attack, r.scorer, r.auc, r.n_benign, r.n_adversarial
        );
    }
    Ok(())
}
