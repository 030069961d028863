//! Comparison scorers: a context-free unigram control, a category
//! co-occurrence table, and the exact Bayes scorer for the synthetic world.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SyntheticWorldSpec;
use crate::scene_lang::{GridSpec, SceneSentence, SceneWord, TokenSequence, Vocabulary, N_SPECIAL};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("cannot fit counts on an empty corpus")]
    EmptyCorpus,
    #[error("co-occurrence scoring needs at least two words, got {0}")]
    TooShort(usize),
    #[error("word (cell {cell}, category {category}) is outside the table")]
    OutOfRange { cell: u32, category: usize },
    #[error("table file: {0}")]
    Io(#[from] std::io::Error),
    #[error("table file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Unigram token counts and symmetric category co-occurrence counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    pub categories: Vec<String>,
    pub grid: GridSpec,
    pub alpha: f64,
    /// Count per object token, indexed by `token - 2`.
    pub unigram: Vec<u64>,
    /// `|C| x |C|` row-major; entry `(a, b)` counts ordered word pairs
    /// `(i, j)`, `i != j`, in one sentence with categories `a` and `b`.
    pub cooccurrence: Vec<u64>,
    pub corpus_size: usize,
}

impl CooccurrenceTable {
    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn pair_count(&self, a: usize, b: usize) -> u64 {
        self.cooccurrence[a * self.n_categories() + b]
    }

    fn row_total(&self, a: usize) -> u64 {
        let n = self.n_categories();
        self.cooccurrence[a * n..(a + 1) * n].iter().sum()
    }

    /// Smoothed `P(category a | category b)` from pair counts.
    pub fn conditional(&self, a: usize, b: usize) -> f64 {
        (self.pair_count(b, a) as f64 + self.alpha)
            / (self.row_total(b) as f64 + self.alpha * self.n_categories() as f64)
    }

    /// Smoothed marginal probability of an object token.
    pub fn marginal(&self, token: u32) -> f64 {
        let total: u64 = self.unigram.iter().sum();
        let count = self.unigram.get((token as usize).wrapping_sub(N_SPECIAL)).copied().unwrap_or(0);
        (count as f64 + self.alpha) / (total as f64 + self.alpha * self.unigram.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BaselineError> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BaselineError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Counts unigrams and category pairs over a corpus with smoothing `alpha`.
pub fn fit_counts(
    corpus: &[SceneSentence],
    vocab: &Vocabulary,
    alpha: f64,
) -> Result<CooccurrenceTable, BaselineError> {
    if corpus.is_empty() {
        return Err(BaselineError::EmptyCorpus);
    }
    let n = vocab.n_categories();
    let mut unigram = vec![0u64; vocab.n_object_tokens()];
    let mut cooccurrence = vec![0u64; n * n];
    for s in corpus {
        let words = s.words();
        for w in words {
            let t = vocab.token_of(*w).map_err(|_| BaselineError::OutOfRange { cell: w.cell, category: w.category })?;
            unigram[t as usize - N_SPECIAL] += 1;
        }
        for (i, a) in words.iter().enumerate() {
            for (j, b) in words.iter().enumerate() {
                if i != j {
                    cooccurrence[a.category * n + b.category] += 1;
                }
            }
        }
    }
    Ok(CooccurrenceTable {
        categories: vocab.categories().to_vec(),
        grid: vocab.grid(),
        alpha,
        unigram,
        cooccurrence,
        corpus_size: corpus.len(),
    })
}

/// Smoothed marginal of each token (context-free control).
pub fn unigram_confidences(table: &CooccurrenceTable, tokens: &TokenSequence) -> Vec<f64> {
    tokens.as_slice().iter().map(|&t| table.marginal(t)).collect()
}

/// Minimum smoothed marginal over the tokens.
pub fn unigram_score(table: &CooccurrenceTable, tokens: &TokenSequence) -> f64 {
    unigram_confidences(table, tokens).into_iter().fold(1.0, f64::min)
}

/// Per word, the strongest support `max_{j != i} P(c_i | c_j)`.
pub fn cooccurrence_supports(table: &CooccurrenceTable, sentence: &SceneSentence) -> Result<Vec<f64>, BaselineError> {
    let words = sentence.words();
    if words.len() < 2 {
        return Err(BaselineError::TooShort(words.len()));
    }
    if let Some(w) = words.iter().find(|w| w.category >= table.n_categories()) {
        return Err(BaselineError::OutOfRange { cell: w.cell, category: w.category });
    }
    Ok(words
        .iter()
        .enumerate()
        .map(|(i, wi)| {
            words
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, wj)| table.conditional(wi.category, wj.category))
                .fold(0.0, f64::max)
        })
        .collect())
}

/// Every object needs at least one supporting co-occurrence: minimum over
/// words of their best support.
pub fn cooccurrence_score(table: &CooccurrenceTable, sentence: &SceneSentence) -> Result<f64, BaselineError> {
    Ok(cooccurrence_supports(table, sentence)?.into_iter().fold(1.0, f64::min))
}

/// Exact leave-one-out confidences under the synthetic generative model,
/// treating the words as i.i.d. given the theme.
pub fn bayes_oracle_confidences(world: &SyntheticWorldSpec, sentence: &SceneSentence) -> Vec<f64> {
    let words = sentence.words();
    (0..words.len())
        .map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for theme in 0..world.n_themes {
                let context: f64 = words
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &w)| world.word_prob(w, theme))
                    .product();
                den += context;
                num += context * world.word_prob(words[i], theme);
            }
            // An impossible context supports nothing.
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect()
}

pub fn bayes_oracle_score(world: &SyntheticWorldSpec, sentence: &SceneSentence) -> f64 {
    bayes_oracle_confidences(world, sentence).into_iter().fold(1.0, f64::min)
}

/// Exact conditional of the word at each position given the others *and*
/// the sentence's canonical ordering: candidates must sort into the masked
/// slot, and duplicates of a context word are down-weighted by the
/// multinomial count of the sorted multiset. This is the best any model that
/// sees positions can do.
pub fn ordered_oracle_confidences(world: &SyntheticWorldSpec, sentence: &SceneSentence) -> Vec<f64> {
    let words = sentence.words();
    let cells = world.grid.n_cells() as u32;
    let all_words: Vec<SceneWord> =
        (0..world.n_categories()).flat_map(|c| (1..=cells).map(move |cell| SceneWord::new(cell, c))).collect();
    (0..words.len())
        .map(|i| {
            let lo = if i > 0 { Some(words[i - 1]) } else { None };
            let hi = words.get(i + 1).copied();
            let context = |theme: usize| -> f64 {
                words.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &w)| world.word_prob(w, theme)).product()
            };
            let theme_weights: Vec<f64> = (0..world.n_themes).map(context).collect();
            let weight = |w: SceneWord| -> f64 {
                if lo.is_some_and(|l| w < l) || hi.is_some_and(|h| w > h) {
                    return 0.0;
                }
                let dup = words.iter().enumerate().filter(|&(j, &x)| j != i && x == w).count();
                let p: f64 = theme_weights.iter().enumerate().map(|(t, &tw)| tw * world.word_prob(w, t)).sum();
                p / (1 + dup) as f64
            };
            let total: f64 = all_words.iter().map(|&w| weight(w)).sum();
            if total > 0.0 {
                weight(words[i]) / total
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean negative log-likelihood over every position of every sentence.
pub fn mean_nll(confidences: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = confidences.into_iter().fold((0.0, 0usize), |(s, n), c| (s - c.ln(), n + 1));
    sum / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic;

    fn ab_vocab() -> Vocabulary {
        Vocabulary::new(vec!["A".into(), "B".into(), "C".into()], GridSpec::new(3, 3).unwrap()).unwrap()
    }

    fn sent(ws: &[(u32, usize)]) -> SceneSentence {
        SceneSentence::new(ws.iter().map(|&(c, k)| SceneWord::new(c, k)).collect())
    }

    #[test]
    fn pair_counts_are_symmetric() {
        let t = fit_counts(&[sent(&[(1, 0), (2, 1)])], &ab_vocab(), 1.0).unwrap();
        assert_eq!(t.pair_count(0, 1), 1);
        assert_eq!(t.pair_count(1, 0), 1);
        assert_eq!(t.pair_count(0, 0), 0);
        let t = fit_counts(&[sent(&[(1, 0)]), sent(&[(5, 2)])], &ab_vocab(), 1.0).unwrap();
        assert!(t.cooccurrence.iter().all(|&c| c == 0));
        assert!(matches!(fit_counts(&[], &ab_vocab(), 1.0), Err(BaselineError::EmptyCorpus)));
    }

    #[test]
    fn fit_is_order_invariant() {
        let corpus = vec![sent(&[(1, 0), (2, 1)]), sent(&[(3, 2), (3, 2), (9, 0)]), sent(&[(4, 1)])];
        let mut rev = corpus.clone();
        rev.reverse();
        assert_eq!(fit_counts(&corpus, &ab_vocab(), 1.0).unwrap(), fit_counts(&rev, &ab_vocab(), 1.0).unwrap());
    }

    #[test]
    fn unigram_examples() {
        let v = ab_vocab();
        let t = fit_counts(&[sent(&[(1, 0), (2, 1)])], &v, 1.0).unwrap();
        let unseen = v.token_of(SceneWord::new(9, 2)).unwrap();
        assert_eq!(t.marginal(unseen), 1.0 / (2.0 + 27.0));
        let seen = v.token_of(SceneWord::new(1, 0)).unwrap();
        let other = v.token_of(SceneWord::new(2, 1)).unwrap();
        let a = unigram_score(&t, &TokenSequence(vec![seen]));
        let b = unigram_score(&t, &TokenSequence(vec![other, seen]));
        assert_eq!(a, b);
        // Adding a rarer token never raises the score.
        let c = unigram_score(&t, &TokenSequence(vec![seen, unseen]));
        assert!(c <= a);
    }

    #[test]
    fn cooccurrence_examples() {
        let v = ab_vocab();
        let corpus: Vec<_> = (0..1000).map(|_| sent(&[(1, 0), (2, 1)])).collect();
        let t = fit_counts(&corpus, &v, 1.0).unwrap();
        let sup = cooccurrence_supports(&t, &sent(&[(1, 0), (2, 1)])).unwrap();
        assert!(sup.iter().all(|&s| s > 0.99), "{sup:?}");
        // Never-seen pair falls to the smoothing floor.
        let floor = cooccurrence_score(&t, &sent(&[(1, 0), (5, 2)])).unwrap();
        assert!(floor < 0.01);
        // Category-level: order and cells do not matter.
        let x = cooccurrence_score(&t, &sent(&[(1, 0), (9, 1), (3, 2)])).unwrap();
        let y = cooccurrence_score(&t, &sent(&[(7, 2), (2, 0), (4, 1)])).unwrap();
        assert_eq!(x, y);
        assert!(matches!(cooccurrence_score(&t, &sent(&[(1, 0)])), Err(BaselineError::TooShort(1))));
    }

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        let t = fit_counts(&[sent(&[(1, 0), (2, 1)])], &ab_vocab(), 0.5).unwrap();
        t.save(&p).unwrap();
        assert_eq!(CooccurrenceTable::load(&p).unwrap(), t);
    }

    #[test]
    fn synthetic_counts_have_no_cross_theme_pairs_and_converge() {
        let world = SyntheticWorldSpec { seed: 21, ..Default::default() };
        let vocab = world.vocabulary();
        let corpus = generate_synthetic(&world, 100_000).unwrap();
        let t = fit_counts(&corpus, &vocab, 1.0).unwrap();
        let n = world.n_categories();
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                if world.theme_of(a) != world.theme_of(b) {
                    assert_eq!(t.pair_count(a, b), 0);
                } else {
                    // Co-words are uniform over the theme's categories.
                    worst = worst.max((t.conditional(a, b) - 1.0 / world.group_size as f64).abs());
                }
            }
        }
        assert!(worst <= 0.02, "max deviation {worst}");
    }

    #[test]
    fn oracle_closed_form() {
        let world = SyntheticWorldSpec::default();
        // Theme 0 = categories 0..4 with home cells 1..4.
        let s = sent(&[(1, 0), (2, 1), (3, 2)]);
        for c in bayes_oracle_confidences(&world, &s) {
            assert!((c - 0.6 / 4.0).abs() < 1e-15);
        }
        let mixed = sent(&[(1, 0), (2, 1), (5, 4)]);
        assert_eq!(bayes_oracle_score(&world, &mixed), 0.0);
        // Length one: no context, so the theme prior stays uniform.
        let single = bayes_oracle_confidences(&world, &sent(&[(1, 0)]));
        assert!((single[0] - 0.2 * 0.15).abs() < 1e-15);
    }

    #[test]
    fn ordered_oracle_is_a_distribution() {
        let world = SyntheticWorldSpec::default();
        let corpus = generate_synthetic(&world, 300).unwrap();
        let cells = world.grid.n_cells() as u32;
        for s in corpus.iter().take(30) {
            for i in 0..s.len() {
                // Sum the ordered conditional over every candidate word.
                let total: f64 = (0..world.n_categories())
                    .flat_map(|c| (1..=cells).map(move |cell| SceneWord::new(cell, c)))
                    .map(|w| {
                        let mut ws = s.words().to_vec();
                        ws[i] = w;
                        if ws.windows(2).all(|p| p[0] <= p[1]) {
                            ordered_oracle_confidences(&world, &SceneSentence::new(ws))[i]
                        } else {
                            0.0
                        }
                    })
                    .sum();
                assert!((total - 1.0).abs() < 1e-9, "total {total}");
            }
        }
        // Ordering information can only help on average.
        let plain = mean_nll(corpus.iter().flat_map(|s| bayes_oracle_confidences(&world, s)));
        let ordered = mean_nll(corpus.iter().flat_map(|s| ordered_oracle_confidences(&world, s)));
        assert!(ordered < plain);
    }
}
