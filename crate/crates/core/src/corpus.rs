//! Scene corpora: the canonical `scenes.jsonl` interchange format, a COCO
//! instances adapter, filtering and splitting, and a synthetic scene world
//! whose generative process is known exactly.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_lang::{encode_scene, GridSpec, SceneLangError, SceneObject, SceneSentence, SceneWord, Vocabulary};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("scene `{scene_id}`: {source}")]
    Lookup { scene_id: String, source: SceneLangError },
    #[error("duplicate scene id `{0}`")]
    DuplicateId(String),
    #[error("COCO instances: {0}")]
    CocoFormat(serde_json::Error),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid synthetic world: {0}")]
    InvalidWorld(String),
    #[error("invalid argument: {0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

/// One line of `scenes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub objects: Vec<SceneObject>,
}

/// A scene identifier together with its encoded sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub sentence: SceneSentence,
}

impl Scene {
    pub fn new(id: impl Into<String>, sentence: SceneSentence) -> Self {
        Self { id: id.into(), sentence }
    }

    /// Record form, placing each word's object box over its whole cell.
    pub fn to_record(&self, vocab: &Vocabulary) -> SceneRecord {
        let grid = vocab.grid();
        let objects = self
            .sentence
            .words()
            .iter()
            .map(|w| SceneObject {
                category: vocab.category_name(w.category).expect("word within vocabulary").to_string(),
                bbox: grid.cell_rect(w.cell),
            })
            .collect();
        SceneRecord { scene_id: self.id.clone(), objects }
    }
}

/// Reads raw records without encoding them. Blank lines are skipped.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord =
            serde_json::from_str(&line).map_err(|source| CorpusError::Parse { line: i + 1, source })?;
        if !seen.insert(rec.scene_id.clone()) {
            return Err(CorpusError::DuplicateId(rec.scene_id));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Loads `scenes.jsonl` and encodes every record, preserving file order.
pub fn load_scenes(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<Scene>, CorpusError> {
    read_records(path)?
        .into_iter()
        .map(|rec| {
            let sentence = encode_scene(&rec.objects, vocab)
                .map_err(|source| CorpusError::Lookup { scene_id: rec.scene_id.clone(), source })?;
            Ok(Scene { id: rec.scene_id, sentence })
        })
        .collect()
}

pub fn write_records(path: impl AsRef<Path>, records: &[SceneRecord]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("scene record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_scenes(path: impl AsRef<Path>, scenes: &[Scene], vocab: &Vocabulary) -> Result<(), CorpusError> {
    let records: Vec<_> = scenes.iter().map(|s| s.to_record(vocab)).collect();
    write_records(path, &records)
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Deserialize)]
struct CocoInstances {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

/// Result of converting a COCO instances file.
#[derive(Debug, Clone)]
pub struct CocoImport {
    pub records: Vec<SceneRecord>,
    /// Category names ordered by COCO category id.
    pub categories: Vec<String>,
}

/// Converts COCO instances JSON into canonical scene records. Images without
/// annotations produce no record; records are ordered by image id.
pub fn convert_coco(json: &str) -> Result<CocoImport, CorpusError> {
    let coco: CocoInstances = serde_json::from_str(json).map_err(CorpusError::CocoFormat)?;
    let mut cats: Vec<&CocoCategory> = coco.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let cat_names: HashMap<u64, &str> = cats.iter().map(|c| (c.id, c.name.as_str())).collect();
    let images: HashMap<u64, &CocoImage> = coco.images.iter().map(|im| (im.id, im)).collect();

    let mut by_image: BTreeMap<u64, Vec<SceneObject>> = BTreeMap::new();
    for ann in &coco.annotations {
        let img = images.get(&ann.image_id).ok_or_else(|| {
            CorpusError::Integrity(format!("annotation references missing image id {}", ann.image_id))
        })?;
        if !(img.width > 0.0 && img.height > 0.0) {
            return Err(CorpusError::Integrity(format!(
                "image {} has non-positive size {}x{}",
                img.id, img.width, img.height
            )));
        }
        let name = cat_names.get(&ann.category_id).ok_or_else(|| {
            CorpusError::Integrity(format!("annotation references missing category id {}", ann.category_id))
        })?;
        let [x, y, w, h] = ann.bbox;
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        let x0 = clamp(x / img.width);
        let y0 = clamp(y / img.height);
        let bbox = [x0, y0, clamp((x + w) / img.width).max(x0), clamp((y + h) / img.height).max(y0)];
        by_image.entry(img.id).or_default().push(SceneObject { category: name.to_string(), bbox });
    }
    let records = by_image.into_iter().map(|(id, objects)| SceneRecord { scene_id: id.to_string(), objects }).collect();
    Ok(CocoImport { records, categories: cats.iter().map(|c| c.name.clone()).collect() })
}

/// Reads a COCO instances file and writes `scenes.jsonl`; returns the number
/// of scenes written.
pub fn import_coco(instances_json: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<CocoImport, CorpusError> {
    let path = instances_json.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let import = convert_coco(&text)?;
    write_records(out, &import.records)?;
    Ok(import)
}

/// Keeps scenes with at least `min_n` words, in order.
pub fn filter_min_objects(scenes: Vec<Scene>, min_n: usize) -> Vec<Scene> {
    scenes.into_iter().filter(|s| s.sentence.len() >= min_n).collect()
}

/// Seeded shuffle followed by a split into `(train, eval)`. The train side
/// receives `round(len * train_fraction)` items.
pub fn split<T>(items: Vec<T>, train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), CorpusError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::Usage(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut items = items;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let n_train = (items.len() as f64 * train_fraction).round() as usize;
    let eval = items.split_off(n_train.min(items.len()));
    Ok((items, eval))
}

/// Parameters of the synthetic scene world. Categories are grouped into
/// `n_themes` disjoint themes of `group_size` consecutive indices; every
/// scene draws all of its objects from one theme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    pub n_themes: usize,
    pub group_size: usize,
    pub grid: GridSpec,
    pub home_prob: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        Self {
            n_themes: 5,
            group_size: 4,
            grid: GridSpec { h: 3, w: 3 },
            home_prob: 0.6,
            min_objects: 2,
            max_objects: 6,
            seed: 1,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidWorld(m.to_string()));
        if self.n_themes == 0 || self.group_size == 0 {
            return bad("n_themes and group_size must be positive");
        }
        if self.grid.h == 0 || self.grid.w == 0 {
            return bad("grid dimensions must be positive");
        }
        if !(self.home_prob > 0.0 && self.home_prob < 1.0) {
            return bad("home_prob must lie strictly between 0 and 1");
        }
        if self.grid.n_cells() < 2 {
            return bad("grid needs at least two cells");
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            return bad("object count range must satisfy 2 <= min <= max");
        }
        Ok(())
    }

    pub fn n_categories(&self) -> usize {
        self.n_themes * self.group_size
    }

    pub fn object_count_range(&self) -> RangeInclusive<usize> {
        self.min_objects..=self.max_objects
    }

    pub fn theme_of(&self, category: usize) -> usize {
        category / self.group_size
    }

    pub fn theme_categories(&self, theme: usize) -> std::ops::Range<usize> {
        theme * self.group_size..(theme + 1) * self.group_size
    }

    pub fn home_cell(&self, category: usize) -> u32 {
        (category % self.grid.n_cells()) as u32 + 1
    }

    pub fn category_names(&self) -> Vec<String> {
        (0..self.n_categories()).map(|c| format!("theme{}_obj{}", self.theme_of(c), c % self.group_size)).collect()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.category_names(), self.grid).expect("synthetic category names are unique")
    }

    /// `P(word | theme)` under the generative process.
    pub fn word_prob(&self, word: SceneWord, theme: usize) -> f64 {
        if self.theme_of(word.category) != theme || word.category >= self.n_categories() {
            return 0.0;
        }
        let cell_p = if word.cell == self.home_cell(word.category) {
            self.home_prob
        } else {
            (1.0 - self.home_prob) / (self.grid.n_cells() - 1) as f64
        };
        cell_p / self.group_size as f64
    }

    fn sample_word(&self, theme: usize, rng: &mut impl Rng) -> SceneWord {
        let category = theme * self.group_size + rng.random_range(0..self.group_size);
        let home = self.home_cell(category);
        let cell = if rng.random_bool(self.home_prob) {
            home
        } else {
            // Uniform over the other cells: draw from n-1 slots, skip home.
            let c = rng.random_range(1..self.grid.n_cells() as u32);
            if c >= home {
                c + 1
            } else {
                c
            }
        };
        SceneWord { cell, category }
    }
}

/// Samples `n_scenes` sentences from the synthetic world; deterministic in
/// `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticWorldSpec, n_scenes: usize) -> Result<Vec<SceneSentence>, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out = (0..n_scenes)
        .map(|_| {
            let theme = rng.random_range(0..spec.n_themes);
            let m = rng.random_range(spec.object_count_range());
            SceneSentence::new((0..m).map(|_| spec.sample_word(theme, &mut rng)).collect())
        })
        .collect();
    Ok(out)
}

/// [`generate_synthetic`] with sequential scene ids `synth-000000`, ...
pub fn generate_synthetic_scenes(spec: &SyntheticWorldSpec, n_scenes: usize) -> Result<Vec<Scene>, CorpusError> {
    Ok(generate_synthetic(spec, n_scenes)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| Scene::new(format!("synth-{i:06}"), s))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn vocab() -> Vocabulary {
        Vocabulary::new(vec!["cat".into(), "dog".into(), "car".into()], GridSpec::new(3, 3).unwrap()).unwrap()
    }

    fn scene_with(n: usize, id: &str) -> Scene {
        Scene::new(id, SceneSentence::new((0..n).map(|i| SceneWord::new(1 + i as u32, 0)).collect()))
    }

    #[test]
    fn load_two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scenes.jsonl");
        std::fs::write(
            &p,
            concat!(
                r#"{"scene_id":"a","objects":[{"category":"dog","bbox":[0.7,0.7,0.9,0.9]},{"category":"cat","bbox":[0,0,0.2,0.2]}]}"#,
                "\n",
                r#"{"scene_id":"b","objects":[{"category":"car","bbox":[0.4,0.4,0.6,0.6]}]}"#,
                "\n"
            ),
        )
        .unwrap();
        let scenes = load_scenes(&p, &vocab()).unwrap();
        assert_eq!(scenes.len(), 2);
        assert_eq!(scenes[0].id, "a");
        assert_eq!(scenes[0].sentence.words(), &[SceneWord::new(1, 0), SceneWord::new(9, 1)]);
        assert_eq!(scenes[1].sentence.words(), &[SceneWord::new(5, 2)]);
    }

    #[test]
    fn load_unknown_category_names_offender() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scenes.jsonl");
        std::fs::write(&p, r#"{"scene_id":"s42","objects":[{"category":"dragon","bbox":[0,0,1,1]}]}"#).unwrap();
        let err = load_scenes(&p, &vocab()).unwrap_err().to_string();
        assert!(err.contains("dragon") && err.contains("s42"), "{err}");
    }

    #[test]
    fn load_malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scenes.jsonl");
        std::fs::write(&p, "{\"scene_id\":\"a\",\"objects\":[]}\n{not json\n").unwrap();
        match load_scenes(&p, &vocab()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scenes.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_scenes(&p, &vocab()).unwrap().is_empty());
    }

    #[test]
    fn coco_box_normalization() {
        let json = r#"{"images":[{"id":1,"width":100,"height":200}],
            "annotations":[{"image_id":1,"category_id":3,"bbox":[10,20,30,40]}],
            "categories":[{"id":3,"name":"car"}]}"#;
        let imp = convert_coco(json).unwrap();
        assert_eq!(imp.records.len(), 1);
        let b = imp.records[0].objects[0].bbox;
        let expect = [0.1, 0.1, 0.4, 0.3];
        for k in 0..4 {
            assert!((b[k] - expect[k]).abs() < 1e-12, "{b:?}");
        }
        assert_eq!(imp.records[0].objects[0].category, "car");
    }

    #[test]
    fn coco_clamps_and_integrity() {
        let json = r#"{"images":[{"id":1,"width":10,"height":10}],
            "annotations":[{"image_id":1,"category_id":1,"bbox":[-2,5,20,9]}],
            "categories":[{"id":1,"name":"cat"}]}"#;
        let imp = convert_coco(json).unwrap();
        imp.records[0].objects[0].validate().unwrap();
        assert_eq!(imp.records[0].objects[0].bbox, [0.0, 0.5, 1.0, 1.0]);

        let missing = r#"{"images":[{"id":1,"width":10,"height":10}],
            "annotations":[{"image_id":2,"category_id":1,"bbox":[0,0,1,1]}],
            "categories":[{"id":1,"name":"cat"}]}"#;
        assert!(matches!(convert_coco(missing), Err(CorpusError::Integrity(_))));

        let zero = r#"{"images":[{"id":1,"width":0,"height":10}],
            "annotations":[{"image_id":1,"category_id":1,"bbox":[0,0,1,1]}],
            "categories":[{"id":1,"name":"cat"}]}"#;
        assert!(matches!(convert_coco(zero), Err(CorpusError::Integrity(_))));
    }

    #[test]
    fn coco_empty_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("inst.json");
        let out = dir.path().join("scenes.jsonl");
        std::fs::write(&src, r#"{"images":[{"id":1,"width":10,"height":10}],"annotations":[],"categories":[]}"#)
            .unwrap();
        let imp = import_coco(&src, &out).unwrap();
        assert_eq!(imp.records.len(), 0);
        assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
    }

    #[test]
    fn filter_examples() {
        let scenes = vec![scene_with(1, "a"), scene_with(2, "b"), scene_with(3, "c")];
        let kept = filter_min_objects(scenes.clone(), 2);
        assert_eq!(kept.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["b", "c"]);
        assert!(filter_min_objects(vec![scene_with(1, "a")], 2).is_empty());
        assert_eq!(filter_min_objects(scenes.clone(), 0), scenes);
    }

    #[test]
    fn split_examples() {
        let items: Vec<usize> = (0..10).collect();
        let (a, b) = split(items.clone(), 0.8, 7).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a2, b2) = split(items.clone(), 0.8, 7).unwrap();
        assert_eq!((&a, &b), (&a2, &b2));
        let (c, d) = split(items.clone(), 0.8, 8).unwrap();
        let mut all: Vec<_> = c.iter().chain(&d).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_ne!(a, c);
        assert!(split(items.clone(), 1.0, 1).is_err());
        assert!(split(items, 0.0, 1).is_err());
    }

    #[test]
    fn synthetic_single_theme_per_scene() {
        let spec = SyntheticWorldSpec::default();
        let corpus = generate_synthetic(&spec, 1000).unwrap();
        for s in &corpus {
            let themes: HashSet<_> = s.words().iter().map(|w| spec.theme_of(w.category)).collect();
            assert_eq!(themes.len(), 1);
            assert!(spec.object_count_range().contains(&s.len()));
            assert!(s.is_canonical());
        }
    }

    #[test]
    fn synthetic_home_frequency() {
        let spec = SyntheticWorldSpec { seed: 11, ..Default::default() };
        let corpus = generate_synthetic(&spec, 25_000).unwrap();
        let words: Vec<_> = corpus.iter().flat_map(|s| s.words().iter().copied()).take(100_000).collect();
        assert_eq!(words.len(), 100_000);
        let home = words.iter().filter(|w| w.cell == spec.home_cell(w.category)).count();
        let freq = home as f64 / words.len() as f64;
        assert!((freq - 0.6).abs() < 0.01, "home frequency {freq}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticWorldSpec::default();
        let a = generate_synthetic_scenes(&spec, 200).unwrap();
        let b = generate_synthetic_scenes(&spec, 200).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scenes(&SyntheticWorldSpec { seed: 2, ..spec }, 200).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_cooccurrence_structure() {
        // Cross-theme co-occurrence is zero; within-theme category pairs are
        // close to uniform (chi-square with 15 dof per theme block).
        let spec = SyntheticWorldSpec { seed: 5, ..Default::default() };
        let corpus = generate_synthetic(&spec, 20_000).unwrap();
        let n = spec.n_categories();
        let mut counts = vec![vec![0u64; n]; n];
        for s in &corpus {
            let w = s.words();
            for i in 0..w.len() {
                for j in 0..w.len() {
                    if i != j {
                        counts[w[i].category][w[j].category] += 1;
                    }
                }
            }
        }
        for (a, row) in counts.iter().enumerate() {
            for (b, &c) in row.iter().enumerate() {
                if spec.theme_of(a) != spec.theme_of(b) {
                    assert_eq!(c, 0);
                }
            }
        }
        for t in 0..spec.n_themes {
            let cats = spec.theme_categories(t);
            let cells: Vec<f64> = cats
                .clone()
                .flat_map(|a| cats.clone().map(move |b| (a, b)))
                .map(|(a, b)| counts[a][b] as f64)
                .collect();
            let mean = cells.iter().sum::<f64>() / cells.len() as f64;
            let chi2: f64 = cells.iter().map(|c| (c - mean).powi(2) / mean).sum();
            // Ordered pairs within a scene are not independent, so allow
            // generous headroom over the 0.999 quantile (37.7).
            assert!(chi2 < 120.0, "theme {t} chi2 {chi2}");
        }
    }

    #[test]
    fn synthetic_scene_records_round_trip() {
        let spec = SyntheticWorldSpec::default();
        let vocab = spec.vocabulary();
        let scenes = generate_synthetic_scenes(&spec, 50).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scenes.jsonl");
        write_scenes(&p, &scenes, &vocab).unwrap();
        assert_eq!(load_scenes(&p, &vocab).unwrap(), scenes);
    }

    #[test]
    fn world_validation() {
        assert!(SyntheticWorldSpec { home_prob: 1.0, ..Default::default() }.validate().is_err());
        assert!(SyntheticWorldSpec { min_objects: 1, ..Default::default() }.validate().is_err());
        assert!(SyntheticWorldSpec { max_objects: 1, ..Default::default() }.validate().is_err());
        SyntheticWorldSpec::default().validate().unwrap();
    }

    #[test]
    fn word_prob_sums_to_one_within_theme() {
        let spec = SyntheticWorldSpec::default();
        for t in 0..spec.n_themes {
            let total: f64 = (0..spec.n_categories())
                .flat_map(|c| (1..=9).map(move |cell| SceneWord::new(cell, c)))
                .map(|w| spec.word_prob(w, t))
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
