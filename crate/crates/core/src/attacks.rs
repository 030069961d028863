//! Label-space simulations of the three attack goals: relabel one object
//! (misclassification), drop one object (hiding), or fabricate one object
//! (appearing). Every edit is reproducible from its recorded seed.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Scene, SyntheticWorldSpec};
use crate::scene_lang::{SceneSentence, SceneWord, Vocabulary};

/// Resampling bound for appearing attacks that land on an existing word.
const APPEAR_RETRIES: usize = 100;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack infeasible: {0}")]
    Infeasible(String),
    #[error("generated {achieved} of {requested} attacks within {draws} draws")]
    Generation { achieved: usize, requested: usize, draws: usize },
    #[error("attack record: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackType {
    Misclassification,
    Hiding,
    Appearing,
}

impl AttackType {
    pub const ALL: [AttackType; 3] = [AttackType::Misclassification, AttackType::Hiding, AttackType::Appearing];
}

impl fmt::Display for AttackType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackType::Misclassification => "misclassification",
            AttackType::Hiding => "hiding",
            AttackType::Appearing => "appearing",
        })
    }
}

impl FromStr for AttackType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "misclassification" | "misclassify" => Ok(Self::Misclassification),
            "hiding" | "hide" => Ok(Self::Hiding),
            "appearing" | "appear" => Ok(Self::Appearing),
            _ => Err(format!("unknown attack type `{s}`")),
        }
    }
}

/// Which categories an attacker may introduce.
#[derive(Debug, Clone, PartialEq)]
pub enum CategoryPool {
    /// Any category of the vocabulary (untargeted attacks).
    Uniform { n_categories: usize },
    /// Synthetic world only: categories from a different theme than the
    /// sentence, a guaranteed context violation.
    CrossTheme(SyntheticWorldSpec),
    /// Synthetic world only: another category of the victim's theme whose
    /// home cell differs from the victim's cell, so only the location is
    /// out of place.
    InThemeOffHome(SyntheticWorldSpec),
}

impl CategoryPool {
    pub fn name(&self) -> &'static str {
        match self {
            CategoryPool::Uniform { .. } => "uniform",
            CategoryPool::CrossTheme(_) => "cross-theme",
            CategoryPool::InThemeOffHome(_) => "in-theme-off-home",
        }
    }

    /// Replacement categories for `victim` in a misclassification.
    fn replacements(&self, victim: SceneWord) -> Vec<usize> {
        match self {
            CategoryPool::Uniform { n_categories } => (0..*n_categories).filter(|&c| c != victim.category).collect(),
            CategoryPool::CrossTheme(w) => {
                let theme = w.theme_of(victim.category);
                (0..w.n_categories()).filter(|&c| w.theme_of(c) != theme).collect()
            }
            CategoryPool::InThemeOffHome(w) => w
                .theme_categories(w.theme_of(victim.category))
                .filter(|&c| c != victim.category && w.home_cell(c) != victim.cell)
                .collect(),
        }
    }

    /// Categories an appearing attack may insert into `sentence`.
    fn insertions(&self, sentence: &SceneSentence) -> Vec<usize> {
        match self {
            CategoryPool::Uniform { n_categories } => (0..*n_categories).collect(),
            CategoryPool::CrossTheme(w) => {
                let present: Vec<usize> = sentence.words().iter().map(|x| w.theme_of(x.category)).collect();
                (0..w.n_categories()).filter(|&c| !present.contains(&w.theme_of(c))).collect()
            }
            CategoryPool::InThemeOffHome(w) => match sentence.words().first() {
                Some(first) => w.theme_categories(w.theme_of(first.category)).collect(),
                None => (0..w.n_categories()).collect(),
            },
        }
    }

    /// Cells allowed for an inserted word of `category`.
    fn insertion_cells(&self, category: usize, n_cells: u32) -> Vec<u32> {
        match self {
            CategoryPool::InThemeOffHome(w) => (1..=n_cells).filter(|&c| c != w.home_cell(category)).collect(),
            _ => (1..=n_cells).collect(),
        }
    }
}

/// What an attack changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackTarget {
    /// Word at `index` of the benign sentence relabeled from `from` to `to`.
    Relabeled {
        index: usize,
        from: SceneWord,
        to: SceneWord,
    },
    Removed {
        index: usize,
        word: SceneWord,
    },
    Inserted {
        word: SceneWord,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackRecord {
    pub scene_id: String,
    pub attack_type: AttackType,
    pub seed: u64,
    pub benign: SceneSentence,
    pub attacked: SceneSentence,
    pub target: AttackTarget,
}

fn infeasible(msg: impl Into<String>) -> AttackError {
    AttackError::Infeasible(msg.into())
}

pub fn attack_misclassify(scene: &Scene, seed: u64, pool: &CategoryPool) -> Result<AttackRecord, AttackError> {
    let words = scene.sentence.words();
    if words.is_empty() {
        return Err(infeasible("cannot relabel an object in an empty sentence"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = rng.random_range(0..words.len());
    let from = words[index];
    let candidates = pool.replacements(from);
    let &category = candidates
        .choose(&mut rng)
        .ok_or_else(|| infeasible(format!("no replacement category for {from:?} under {} pool", pool.name())))?;
    let to = SceneWord { cell: from.cell, category };
    let mut edited = words.to_vec();
    edited[index] = to;
    Ok(AttackRecord {
        scene_id: scene.id.clone(),
        attack_type: AttackType::Misclassification,
        seed,
        benign: scene.sentence.clone(),
        attacked: SceneSentence::new(edited),
        target: AttackTarget::Relabeled { index, from, to },
    })
}

pub fn attack_hide(scene: &Scene, seed: u64) -> Result<AttackRecord, AttackError> {
    let words = scene.sentence.words();
    if words.len() < 2 {
        return Err(infeasible(format!("hiding needs at least 2 objects, sentence has {}", words.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = rng.random_range(0..words.len());
    let mut edited = words.to_vec();
    let word = edited.remove(index);
    Ok(AttackRecord {
        scene_id: scene.id.clone(),
        attack_type: AttackType::Hiding,
        seed,
        benign: scene.sentence.clone(),
        attacked: SceneSentence::new(edited),
        target: AttackTarget::Removed { index, word },
    })
}

pub fn attack_appear(
    scene: &Scene,
    seed: u64,
    pool: &CategoryPool,
    vocab: &Vocabulary,
) -> Result<AttackRecord, AttackError> {
    let words = scene.sentence.words();
    let categories = pool.insertions(&scene.sentence);
    if categories.is_empty() {
        return Err(infeasible(format!("no insertable category under {} pool", pool.name())));
    }
    let n_cells = vocab.grid().n_cells() as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..APPEAR_RETRIES {
        let category = *categories.choose(&mut rng).expect("nonempty");
        let cells = pool.insertion_cells(category, n_cells);
        let Some(&cell) = cells.choose(&mut rng) else { continue };
        let word = SceneWord { cell, category };
        if words.contains(&word) {
            continue;
        }
        let mut edited = words.to_vec();
        edited.push(word);
        return Ok(AttackRecord {
            scene_id: scene.id.clone(),
            attack_type: AttackType::Appearing,
            seed,
            benign: scene.sentence.clone(),
            attacked: SceneSentence::new(edited),
            target: AttackTarget::Inserted { word },
        });
    }
    Err(infeasible(format!("no unused (cell, category) slot found in {APPEAR_RETRIES} draws")))
}

pub fn apply_attack(
    scene: &Scene,
    attack: AttackType,
    seed: u64,
    pool: &CategoryPool,
    vocab: &Vocabulary,
) -> Result<AttackRecord, AttackError> {
    match attack {
        AttackType::Misclassification => attack_misclassify(scene, seed, pool),
        AttackType::Hiding => attack_hide(scene, seed),
        AttackType::Appearing => attack_appear(scene, seed, pool, vocab),
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `draw`-th attack derived from the master seed.
pub fn record_seed(master: u64, draw: u64) -> u64 {
    mix(mix(master) ^ draw)
}

/// Draws scenes with replacement and attacks each until `n_attacks` records
/// exist. Infeasible draws are skipped; at most `10 * n_attacks + 100` draws
/// are made.
pub fn generate_attack_set(
    corpus: &[Scene],
    attack: AttackType,
    n_attacks: usize,
    seed: u64,
    pool: &CategoryPool,
    vocab: &Vocabulary,
) -> Result<Vec<AttackRecord>, AttackError> {
    let max_draws = 10 * n_attacks + 100;
    if corpus.is_empty() && n_attacks > 0 {
        return Err(AttackError::Generation { achieved: 0, requested: n_attacks, draws: 0 });
    }
    let mut out = Vec::with_capacity(n_attacks);
    let mut skipped = 0usize;
    let mut draw = 0usize;
    while out.len() < n_attacks {
        if draw == max_draws {
            return Err(AttackError::Generation { achieved: out.len(), requested: n_attacks, draws: draw });
        }
        let rs = record_seed(seed, draw as u64);
        draw += 1;
        let scene = &corpus[ChaCha8Rng::seed_from_u64(rs ^ 0x5ce4e).random_range(0..corpus.len())];
        match apply_attack(scene, attack, rs, pool, vocab) {
            Ok(rec) => out.push(rec),
            Err(e) => {
                skipped += 1;
                log::debug!("skipping draw {} on scene {}: {e}", draw - 1, scene.id);
            }
        }
    }
    if skipped > 0 {
        log::info!("{attack}: skipped {skipped} infeasible draws");
    }
    Ok(out)
}

/// Wire form of a word: `[cell, "category name"]`.
type WireWord = (u32, String);

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum WireTarget {
    Relabeled { index: usize, from: WireWord, to: WireWord },
    Removed { index: usize, word: WireWord },
    Inserted { word: WireWord },
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    scene_id: String,
    attack_type: AttackType,
    seed: u64,
    benign: Vec<WireWord>,
    attacked: Vec<WireWord>,
    target: WireTarget,
}

impl AttackRecord {
    pub fn to_json_line(&self, vocab: &Vocabulary) -> String {
        let w = |x: SceneWord| (x.cell, vocab.category_name(x.category).unwrap_or("?").to_string());
        let ws = |s: &SceneSentence| s.words().iter().map(|&x| w(x)).collect();
        let target = match self.target {
            AttackTarget::Relabeled { index, from, to } => WireTarget::Relabeled { index, from: w(from), to: w(to) },
            AttackTarget::Removed { index, word } => WireTarget::Removed { index, word: w(word) },
            AttackTarget::Inserted { word } => WireTarget::Inserted { word: w(word) },
        };
        let rec = WireRecord {
            scene_id: self.scene_id.clone(),
            attack_type: self.attack_type,
            seed: self.seed,
            benign: ws(&self.benign),
            attacked: ws(&self.attacked),
            target,
        };
        serde_json::to_string(&rec).expect("attack record serializes")
    }

    pub fn from_json_line(line: &str, vocab: &Vocabulary) -> Result<Self, AttackError> {
        let rec: WireRecord = serde_json::from_str(line).map_err(|e| AttackError::Format(e.to_string()))?;
        let w = |(cell, name): WireWord| -> Result<SceneWord, AttackError> {
            let category = vocab.category_index(&name).map_err(|e| AttackError::Format(e.to_string()))?;
            let word = SceneWord { cell, category };
            vocab.check_word(word).map_err(|e| AttackError::Format(e.to_string()))?;
            Ok(word)
        };
        let ws = |v: Vec<WireWord>| -> Result<SceneSentence, AttackError> {
            Ok(SceneSentence::new(v.into_iter().map(w).collect::<Result<_, _>>()?))
        };
        let target = match rec.target {
            WireTarget::Relabeled { index, from, to } => AttackTarget::Relabeled { index, from: w(from)?, to: w(to)? },
            WireTarget::Removed { index, word } => AttackTarget::Removed { index, word: w(word)? },
            WireTarget::Inserted { word } => AttackTarget::Inserted { word: w(word)? },
        };
        Ok(AttackRecord {
            scene_id: rec.scene_id,
            attack_type: rec.attack_type,
            seed: rec.seed,
            benign: ws(rec.benign)?,
            attacked: ws(rec.attacked)?,
            target,
        })
    }
}

pub fn write_attacks(mut w: impl Write, records: &[AttackRecord], vocab: &Vocabulary) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_json_line(vocab))?;
    }
    w.flush()
}

pub fn read_attacks(r: impl BufRead, vocab: &Vocabulary) -> Result<Vec<AttackRecord>, AttackError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| AttackError::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            AttackRecord::from_json_line(&line, vocab)
                .map_err(|e| AttackError::Format(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}
