//! Run configuration. A JSON file passed with `--config` supplies defaults
//! for any field below; command-line flags override it. Every section and
//! field is optional.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "grid": "3x3",
//!   "synth": {"n_scenes": 22000, "n_themes": 5, "group_size": 4, "home_prob": 0.6,
//!             "min_objects": 2, "max_objects": 6},
//!   "model": {"n_layers": 6, "n_heads": 12, "hidden_dim": 96, "ffn_dim": 384,
//!             "max_seq_len": 64, "dropout_prob": 0.1},
//!   "train": {"epochs": 30, "batch_size": 32, "lr": 0.001, "train_fraction": 0.9,
//!             "min_objects": 2, "alpha": 1.0},
//!   "attack": {"attack_type": "misclassification", "count": 1000, "pool": "uniform"},
//!   "score": {"scorer": "scene-bert", "variant": "strict", "k": null, "workers": 1}
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::failure::{Failure, Kind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: String,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub score: ScoreSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: "3x3".into(),
            synth: SynthSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            score: ScoreSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_scenes: usize,
    pub n_themes: usize,
    pub group_size: usize,
    pub home_prob: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { n_scenes: 22_000, n_themes: 5, group_size: 4, home_prob: 0.6, min_objects: 2, max_objects: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout_prob: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { n_layers: 6, n_heads: 12, hidden_dim: 96, ffn_dim: 384, max_seq_len: 64, dropout_prob: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_fraction: f64,
    pub min_objects: usize,
    /// Smoothing of the co-occurrence table fitted alongside the model.
    pub alpha: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, lr: 1e-3, train_fraction: 0.9, min_objects: 2, alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// `misclassification`, `hiding`, `appearing` or `all`.
    pub attack_type: String,
    pub count: usize,
    /// `uniform`, `cross-theme` or `in-theme-off-home`; the last two need
    /// the synthetic `world.json`.
    pub pool: String,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self { attack_type: "all".into(), count: 1000, pool: "uniform".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    /// `scene-bert`, `unigram`, `cooccurrence` or `oracle`.
    pub scorer: String,
    pub variant: String,
    /// Top-k cutoff; `null` keeps every candidate.
    pub k: Option<usize>,
    pub workers: usize,
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self { scorer: "scene-bert".into(), variant: "strict".into(), k: None, workers: 1 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(Failure::io("config", path))?;
        serde_json::from_str(&text).map_err(|e| Failure::new(Kind::Usage, "config", format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 4, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.model, ModelSection::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 2}}"#).is_err());
    }
}
