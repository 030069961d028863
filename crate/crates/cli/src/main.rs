//! `scenecheck`: build vocabularies, import or synthesize scene corpora,
//! train the scene model, simulate attacks, score, and evaluate.

mod commands;
mod config;
mod failure;
mod presets;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "scenecheck", version, about = "Context-consistency checking of object detections")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Shared {
    /// JSON run configuration supplying defaults for every flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Vocabulary file (`vocab.json`).
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    /// Model checkpoint file.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write vocab.json from a preset or a category list.
    Vocab(VocabArgs),
    /// Convert COCO instances annotations into scenes.jsonl and vocab.json.
    Import(ImportArgs),
    /// Sample a synthetic scene corpus with a known generative process.
    Synth(SynthArgs),
    /// Split a corpus, train the scene model and fit the count baselines.
    Train(TrainArgs),
    /// Simulate label-space attacks on a corpus.
    Attack(AttackArgs),
    /// Score benign scenes and attacked scenes.
    Score(ScoreArgs),
    /// Compute ROC curves, AUC and score densities from score runs.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["voc", "coco", "categories"])))]
pub struct VocabArgs {
    /// The 20 PASCAL VOC categories.
    #[arg(long)]
    pub voc: bool,
    /// The 80 COCO categories.
    #[arg(long)]
    pub coco: bool,
    /// File with one category name per line.
    #[arg(long)]
    pub categories: Option<PathBuf>,
    /// Grid as `HxW`.
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    /// COCO `instances_*.json`.
    #[arg(long)]
    pub coco_json: PathBuf,
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_scenes: Option<usize>,
    #[arg(long)]
    pub n_themes: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub home_prob: Option<f64>,
    #[arg(long)]
    pub min_objects: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Scene corpus (`scenes.jsonl`).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Drop scenes with fewer objects before splitting.
    #[arg(long)]
    pub min_objects: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Scenes to attack, typically the held-out `eval.jsonl`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// misclassification, hiding, appearing or all.
    #[arg(long = "type")]
    pub attack_type: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    /// uniform, cross-theme or in-theme-off-home.
    #[arg(long)]
    pub pool: Option<String>,
    /// Synthetic `world.json`, required by the theme-aware pools.
    #[arg(long)]
    pub world: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Benign scenes (`scenes.jsonl` format).
    #[arg(long)]
    pub benign: PathBuf,
    /// Attack records written by `attack`.
    #[arg(long)]
    pub attacks: PathBuf,
    /// scene-bert, unigram, cooccurrence or oracle.
    #[arg(long)]
    pub scorer: Option<String>,
    /// strict or relax (scene-bert only).
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Count table written by `train` (unigram and cooccurrence scorers).
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Synthetic `world.json` (oracle scorer).
    #[arg(long)]
    pub world: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Output directories of `score` runs.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
}

fn resolve_config(shared: &Shared) -> Result<RunConfig, Failure> {
    let mut cfg = match &shared.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve_config(&cli.shared)?;
    let shared = &cli.shared;
    match cli.command {
        Command::Vocab(a) => commands::vocab(shared, cfg, a),
        Command::Import(a) => commands::import(shared, cfg, a),
        Command::Synth(a) => commands::synth(shared, cfg, a),
        Command::Train(a) => commands::train(shared, cfg, a),
        Command::Attack(a) => commands::attack(shared, cfg, a),
        Command::Score(a) => commands::score(shared, cfg, a),
        Command::Eval(a) => commands::eval(shared, cfg, a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.kind.exit_code());
    }
}
