//! SCENE-Lang: detections encoded as sentences of `(grid cell, category)` words.
//!
//! A detection's bounding-box center picks one cell of an `H x W` grid laid
//! over the image (row-major, origin top-left, `y` growing downward). Each
//! word pairs that cell with the object's category, and a sentence lists the
//! words of one image sorted by cell and then by category index.
//!
//! Token ids: `PAD = 0`, `MASK = 1`, and object words occupy
//! `2 ..= 1 + |C|*H*W` via `2 + category * (H*W) + (cell - 1)`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
/// Number of non-object tokens at the start of the vocabulary.
pub const N_SPECIAL: usize = 2;

#[derive(Debug, Error)]
pub enum SceneLangError {
    #[error("invalid grid {h}x{w}: both dimensions must be at least 1")]
    InvalidGrid { h: usize, w: usize },
    #[error("coordinate ({x}, {y}) lies outside the unit square")]
    Domain { x: f64, y: f64 },
    #[error("invalid bounding box {0:?}: expected 0 <= min <= max <= 1")]
    InvalidBox([f64; 4]),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("duplicate category `{0}` in vocabulary")]
    DuplicateCategory(String),
    #[error("word (cell {cell}, category {category}) is outside the vocabulary")]
    InvalidWord { cell: u32, category: usize },
    #[error("token {0} does not decode to an object word")]
    Decode(u32),
    #[error("malformed grid spec `{0}`: expected HxW")]
    GridSyntax(String),
    #[error("vocabulary file: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
}

impl GridSpec {
    pub fn new(h: usize, w: usize) -> Result<Self, SceneLangError> {
        if h == 0 || w == 0 {
            return Err(SceneLangError::InvalidGrid { h, w });
        }
        Ok(Self { h, w })
    }

    pub fn n_cells(&self) -> usize {
        self.h * self.w
    }

    /// Cell label (1-based) containing the point `(x, y)`. Coordinates of
    /// exactly 1.0 fall into the last column/row.
    pub fn cell_of(&self, x: f64, y: f64) -> Result<u32, SceneLangError> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(SceneLangError::Domain { x, y });
        }
        let col = ((x * self.w as f64).floor() as usize).min(self.w - 1);
        let row = ((y * self.h as f64).floor() as usize).min(self.h - 1);
        Ok((row * self.w + col + 1) as u32)
    }

    /// Rectangle `[x_min, y_min, x_max, y_max]` covered by a cell.
    pub fn cell_rect(&self, cell: u32) -> [f64; 4] {
        let idx = cell as usize - 1;
        let (row, col) = (idx / self.w, idx % self.w);
        [
            col as f64 / self.w as f64,
            row as f64 / self.h as f64,
            (col + 1) as f64 / self.w as f64,
            (row + 1) as f64 / self.h as f64,
        ]
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

impl std::str::FromStr for GridSpec {
    type Err = SceneLangError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SceneLangError::GridSyntax(s.to_string());
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let h = h.trim().parse().map_err(|_| bad())?;
        let w = w.trim().parse().map_err(|_| bad())?;
        GridSpec::new(h, w)
    }
}

/// Free function form of [`GridSpec::cell_of`].
pub fn grid_cell_of(x: f64, y: f64, grid: GridSpec) -> Result<u32, SceneLangError> {
    grid.cell_of(x, y)
}

/// One detection: a category name and a normalized corner-format box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: String,
    pub bbox: [f64; 4],
}

impl SceneObject {
    pub fn new(category: impl Into<String>, bbox: [f64; 4]) -> Result<Self, SceneLangError> {
        let obj = Self { category: category.into(), bbox };
        obj.validate()?;
        Ok(obj)
    }

    pub fn validate(&self) -> Result<(), SceneLangError> {
        let [x0, y0, x1, y1] = self.bbox;
        let ok = (0.0..=1.0).contains(&x0)
            && (0.0..=1.0).contains(&y0)
            && (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y1)
            && x0 <= x1
            && y0 <= y1;
        if ok {
            Ok(())
        } else {
            Err(SceneLangError::InvalidBox(self.bbox))
        }
    }

    pub fn center(&self) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.bbox;
        ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneWord {
    /// Location label in `1..=H*W`.
    pub cell: u32,
    pub category: usize,
}

impl SceneWord {
    pub fn new(cell: u32, category: usize) -> Self {
        Self { cell, category }
    }
}

/// Words of one image in canonical order: cell ascending, then category.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SceneSentence {
    words: Vec<SceneWord>,
}

impl SceneSentence {
    /// Builds a sentence, sorting the words into canonical order.
    pub fn new(mut words: Vec<SceneWord>) -> Self {
        // Derived `Ord` on SceneWord compares (cell, category); sort is stable.
        words.sort();
        Self { words }
    }

    pub fn words(&self) -> &[SceneWord] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn is_canonical(&self) -> bool {
        self.words.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn into_words(self) -> Vec<SceneWord> {
        self.words
    }
}

impl From<Vec<SceneWord>> for SceneSentence {
    fn from(words: Vec<SceneWord>) -> Self {
        Self::new(words)
    }
}

/// Object-token ids of one sentence, in sentence order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    categories: Vec<String>,
    grid: GridSpec,
}

/// Bijection between SCENE-Lang words and token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    categories: Vec<String>,
    index: HashMap<String, usize>,
    grid: GridSpec,
}

impl Vocabulary {
    pub fn new(categories: Vec<String>, grid: GridSpec) -> Result<Self, SceneLangError> {
        GridSpec::new(grid.h, grid.w)?;
        let mut index = HashMap::with_capacity(categories.len());
        for (i, name) in categories.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(SceneLangError::DuplicateCategory(name.clone()));
            }
        }
        Ok(Self { categories, index, grid })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    /// Number of object tokens, `|C| * H * W`.
    pub fn n_object_tokens(&self) -> usize {
        self.categories.len() * self.grid.n_cells()
    }

    /// Total vocabulary size including PAD and MASK.
    pub fn size(&self) -> usize {
        N_SPECIAL + self.n_object_tokens()
    }

    pub fn category_index(&self, name: &str) -> Result<usize, SceneLangError> {
        self.index.get(name).copied().ok_or_else(|| SceneLangError::UnknownCategory(name.to_string()))
    }

    pub fn category_name(&self, index: usize) -> Option<&str> {
        self.categories.get(index).map(String::as_str)
    }

    pub fn check_word(&self, word: SceneWord) -> Result<(), SceneLangError> {
        let cells = self.grid.n_cells() as u32;
        if word.cell == 0 || word.cell > cells || word.category >= self.categories.len() {
            return Err(SceneLangError::InvalidWord { cell: word.cell, category: word.category });
        }
        Ok(())
    }

    pub fn token_of(&self, word: SceneWord) -> Result<u32, SceneLangError> {
        self.check_word(word)?;
        let cells = self.grid.n_cells();
        Ok((N_SPECIAL + word.category * cells + (word.cell as usize - 1)) as u32)
    }

    pub fn word_of(&self, token: u32) -> Result<SceneWord, SceneLangError> {
        let t = token as usize;
        if t < N_SPECIAL || t >= self.size() {
            return Err(SceneLangError::Decode(token));
        }
        let cells = self.grid.n_cells();
        let offset = t - N_SPECIAL;
        Ok(SceneWord { cell: (offset % cells + 1) as u32, category: offset / cells })
    }

    /// Category index of an object token. Panics on special tokens.
    pub fn category_of_token(&self, token: u32) -> usize {
        (token as usize - N_SPECIAL) / self.grid.n_cells()
    }

    /// All object tokens that share `category`, one per grid cell.
    pub fn tokens_of_category(&self, category: usize) -> std::ops::Range<u32> {
        let cells = self.grid.n_cells();
        let start = (N_SPECIAL + category * cells) as u32;
        start..start + cells as u32
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SceneLangError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, SceneLangError> {
        let file: VocabFile = serde_json::from_str(text)?;
        Self::new(file.categories, file.grid)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile { categories: self.categories.clone(), grid: self.grid };
        let mut s = serde_json::to_string_pretty(&file).expect("vocabulary serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SceneLangError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Encodes one image's detections as a canonical sentence. Detection
/// confidences are not part of the input; every object becomes a word.
pub fn encode_scene(objects: &[SceneObject], vocab: &Vocabulary) -> Result<SceneSentence, SceneLangError> {
    let words = objects
        .iter()
        .map(|obj| {
            obj.validate()?;
            let category = vocab.category_index(&obj.category)?;
            let (cx, cy) = obj.center();
            let cell = vocab.grid.cell_of(cx, cy)?;
            Ok(SceneWord { cell, category })
        })
        .collect::<Result<Vec<_>, SceneLangError>>()?;
    Ok(SceneSentence::new(words))
}

pub fn tokenize(sentence: &SceneSentence, vocab: &Vocabulary) -> Result<TokenSequence, SceneLangError> {
    sentence.words().iter().map(|&w| vocab.token_of(w)).collect::<Result<Vec<_>, _>>().map(TokenSequence)
}

pub fn detokenize(tokens: &TokenSequence, vocab: &Vocabulary) -> Result<SceneSentence, SceneLangError> {
    let words = tokens.as_slice().iter().map(|&t| vocab.word_of(t)).collect::<Result<Vec<_>, _>>()?;
    // Token order is preserved as-is; a sequence produced by `tokenize` is
    // already canonical.
    Ok(SceneSentence { words })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid3() -> GridSpec {
        GridSpec::new(3, 3).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn cell_examples() {
        assert_eq!(grid_cell_of(0.5, 0.5, grid3()).unwrap(), 5);
        assert_eq!(grid_cell_of(1.0, 1.0, grid3()).unwrap(), 9);
        assert_eq!(grid_cell_of(0.9, 0.2, grid3()).unwrap(), 3);
        assert_eq!(grid_cell_of(0.0, 0.0, grid3()).unwrap(), 1);
        assert!(matches!(grid_cell_of(1.01, 0.5, grid3()), Err(SceneLangError::Domain { .. })));
        assert!(grid_cell_of(0.5, -0.1, grid3()).is_err());
        assert!(grid_cell_of(f64::NAN, 0.5, grid3()).is_err());
    }

    #[test]
    fn grid_parse() {
        assert_eq!("3x3".parse::<GridSpec>().unwrap(), grid3());
        assert_eq!("2x5".parse::<GridSpec>().unwrap(), GridSpec { h: 2, w: 5 });
        assert!("0x3".parse::<GridSpec>().is_err());
        assert!("33".parse::<GridSpec>().is_err());
        assert!("ax3".parse::<GridSpec>().is_err());
    }

    #[test]
    fn encode_examples() {
        let vocab = Vocabulary::new(names(10), grid3()).unwrap();
        let objs = vec![
            SceneObject::new("c7", [0.7, 0.7, 0.9, 0.9]).unwrap(),
            SceneObject::new("c3", [0.1, 0.1, 0.3, 0.3]).unwrap(),
        ];
        let s = encode_scene(&objs, &vocab).unwrap();
        assert_eq!(s.words(), &[SceneWord::new(1, 3), SceneWord::new(9, 7)]);

        let same_cell = vec![
            SceneObject::new("c7", [0.4, 0.4, 0.6, 0.6]).unwrap(),
            SceneObject::new("c3", [0.4, 0.4, 0.6, 0.6]).unwrap(),
        ];
        let s = encode_scene(&same_cell, &vocab).unwrap();
        assert_eq!(s.words(), &[SceneWord::new(5, 3), SceneWord::new(5, 7)]);

        assert!(encode_scene(&[], &vocab).unwrap().is_empty());

        let bad = vec![SceneObject { category: "dragon".into(), bbox: [0.0, 0.0, 0.1, 0.1] }];
        match encode_scene(&bad, &vocab) {
            Err(SceneLangError::UnknownCategory(name)) => assert_eq!(name, "dragon"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_box_rejected() {
        assert!(SceneObject::new("c0", [0.5, 0.0, 0.4, 0.1]).is_err());
        assert!(SceneObject::new("c0", [0.0, 0.0, 1.2, 0.1]).is_err());
    }

    #[test]
    fn token_examples() {
        let vocab = Vocabulary::new(names(20), grid3()).unwrap();
        assert_eq!(vocab.token_of(SceneWord::new(1, 0)).unwrap(), 2);
        assert_eq!(vocab.token_of(SceneWord::new(9, 19)).unwrap(), 181);
        assert_eq!(vocab.size(), 182);
        assert_eq!(vocab.n_object_tokens(), 180);
        assert_eq!(vocab.word_of(2).unwrap(), SceneWord::new(1, 0));
        assert_eq!(vocab.word_of(181).unwrap(), SceneWord::new(9, 19));
        assert!(matches!(vocab.word_of(PAD), Err(SceneLangError::Decode(0))));
        assert!(vocab.word_of(MASK).is_err());
        assert!(vocab.word_of(182).is_err());
        assert!(vocab.token_of(SceneWord::new(10, 0)).is_err());
        assert!(vocab.token_of(SceneWord::new(0, 0)).is_err());
        assert!(vocab.token_of(SceneWord::new(1, 20)).is_err());
        assert_eq!(vocab.tokens_of_category(19), 173..182);
    }

    #[test]
    fn vocab_sizes() {
        for (c, h, w, expect) in [(20, 3, 3, 182), (80, 3, 3, 722), (1, 1, 1, 3), (7, 2, 5, 72)] {
            let v = Vocabulary::new(names(c), GridSpec::new(h, w).unwrap()).unwrap();
            assert_eq!(v.size(), expect);
            assert_eq!(v.size(), 2 + c * h * w);
        }
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = Vocabulary::new(names(4), GridSpec::new(2, 3).unwrap()).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
        assert!(v.to_json().contains("\"h\": 2"));
        assert!(Vocabulary::new(vec!["a".into(), "a".into()], grid3()).is_err());
    }

    fn arb_sentence(n_cats: usize, cells: u32) -> impl Strategy<Value = SceneSentence> {
        prop::collection::vec((1..=cells, 0..n_cats), 0..12)
            .prop_map(|ws| SceneSentence::new(ws.into_iter().map(|(c, k)| SceneWord::new(c, k)).collect()))
    }

    proptest! {
        #[test]
        fn tokenize_round_trip(s in arb_sentence(20, 9)) {
            let vocab = Vocabulary::new(names(20), grid3()).unwrap();
            let t = tokenize(&s, &vocab).unwrap();
            prop_assert!(t.as_slice().iter().all(|&x| (2..182).contains(&x)));
            prop_assert_eq!(detokenize(&t, &vocab).unwrap(), s);
        }

        #[test]
        fn sorting_is_canonical_and_idempotent(s in arb_sentence(5, 6)) {
            prop_assert!(s.is_canonical());
            let again = SceneSentence::new(s.words().to_vec());
            prop_assert_eq!(again, s);
        }

        #[test]
        fn cell_is_monotone(x in 0.0f64..=1.0, y in 0.0f64..=1.0, dx in 0.0f64..=1.0, dy in 0.0f64..=1.0) {
            let g = GridSpec::new(4, 5).unwrap();
            let a = g.cell_of(x, y).unwrap() - 1;
            let b = g.cell_of((x + dx).min(1.0), (y + dy).min(1.0)).unwrap() - 1;
            prop_assert!(b % 5 >= a % 5);
            prop_assert!(b / 5 >= a / 5);
            prop_assert!((1..=20).contains(&(a + 1)));
        }

        #[test]
        fn cell_rect_center_maps_back(cell in 1u32..=20) {
            let g = GridSpec::new(4, 5).unwrap();
            let [x0, y0, x1, y1] = g.cell_rect(cell);
            prop_assert_eq!(g.cell_of((x0 + x1) / 2.0, (y0 + y1) / 2.0).unwrap(), cell);
        }
    }
}
