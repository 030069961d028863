//! Per-image consistency score: mask each token in turn, ask the model how
//! well the masked object fits the remaining context, and keep the minimum.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{predict_masked, top_k_contains, MaskVector, ModelError, ModelParameters, Real};
use crate::scene_lang::{TokenSequence, Vocabulary};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("cannot score an empty sentence")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("model and vocabulary disagree: model vocab {model}, vocabulary {vocab}")]
    VocabMismatch { model: usize, vocab: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sentence {index}: {source}")]
    AtIndex { index: usize, source: Box<ScoreError> },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Confidence of the exact `(cell, category)` token.
    Strict,
    /// Probability mass of the token's category summed over all cells.
    Relax,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Strict => "strict",
            Variant::Relax => "relax",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(Variant::Strict),
            "relax" => Ok(Variant::Relax),
            _ => Err(format!("unknown variant `{s}` (expected strict or relax)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionScore {
    pub i: usize,
    pub token: u32,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub sentence: TokenSequence,
    pub per_position: Vec<PositionScore>,
    pub score: f64,
    pub variant: Variant,
    pub k: usize,
}

impl ConsistencyReport {
    /// Position with the lowest confidence (first one on ties).
    pub fn argmin(&self) -> Option<usize> {
        self.per_position.iter().min_by(|a, b| a.confidence.total_cmp(&b.confidence)).map(|p| p.i)
    }

    pub fn to_line(&self, scene_id: &str) -> ReportLine {
        ReportLine {
            scene_id: scene_id.to_string(),
            variant: self.variant.to_string(),
            k: Some(self.k),
            score: self.score,
            per_position: self.per_position.clone(),
        }
    }
}

/// One line of a report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub scene_id: String,
    pub variant: String,
    pub k: Option<usize>,
    pub score: f64,
    pub per_position: Vec<PositionScore>,
}

pub fn write_report_lines(mut w: impl Write, lines: &[ReportLine]) -> std::io::Result<()> {
    for line in lines {
        serde_json::to_writer(&mut w, line)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_report_lines(r: impl BufRead) -> std::io::Result<Vec<ReportLine>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Trained model plus the vocabulary it was trained on.
pub struct SceneScorer<'a, F = f32> {
    params: &'a ModelParameters<F>,
    vocab: &'a Vocabulary,
}

impl<'a, F: Real> SceneScorer<'a, F> {
    pub fn new(params: &'a ModelParameters<F>, vocab: &'a Vocabulary) -> Result<Self, ScoreError> {
        let model = params.config().vocab_size;
        if model != vocab.size() {
            return Err(ScoreError::VocabMismatch { model, vocab: vocab.size() });
        }
        Ok(Self { params, vocab })
    }

    /// `k` that disables truncation of the predicted list.
    pub fn full_k(&self) -> usize {
        self.vocab.n_object_tokens()
    }

    /// Masks each position once and returns the predicted distribution at
    /// that position, one row per position.
    fn leave_one_out(&self, tokens: &TokenSequence) -> Result<ndarray::Array2<F>, ScoreError> {
        let n = tokens.len();
        let masks: Vec<MaskVector> = (0..n).map(|i| MaskVector::single(n, i)).collect();
        let examples: Vec<(&[u32], &MaskVector)> = masks.iter().map(|m| (tokens.as_slice(), m)).collect();
        Ok(predict_masked(self.params, &examples)?)
    }

    pub fn score(&self, tokens: &TokenSequence, variant: Variant, k: usize) -> Result<ConsistencyReport, ScoreError> {
        if tokens.is_empty() {
            return Err(ScoreError::Empty);
        }
        if k == 0 {
            return Err(ScoreError::ZeroK);
        }
        let dists = self.leave_one_out(tokens)?;
        let per_position: Vec<PositionScore> = tokens
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = dists.row(i);
                let confidence = match variant {
                    Variant::Strict => {
                        if top_k_contains(row, t, k) {
                            row[t as usize].to_f64_lossy()
                        } else {
                            0.0
                        }
                    }
                    Variant::Relax => self.category_confidence(row, t, k),
                };
                PositionScore { i, token: t, confidence }
            })
            .collect();
        // Algorithm starts from c = 1 and keeps the running minimum.
        let score = per_position.iter().fold(1.0f64, |c, p| c.min(p.confidence));
        Ok(ConsistencyReport { sentence: tokens.clone(), per_position, score, variant, k })
    }

    pub fn strict(&self, tokens: &TokenSequence, k: usize) -> Result<ConsistencyReport, ScoreError> {
        self.score(tokens, Variant::Strict, k)
    }

    pub fn relax(&self, tokens: &TokenSequence, k: usize) -> Result<ConsistencyReport, ScoreError> {
        self.score(tokens, Variant::Relax, k)
    }

    /// Category mass of `token`'s category, or zero when that category does
    /// not rank within the top `k` categories (ties toward lower index).
    fn category_confidence(&self, row: ndarray::ArrayView1<'_, F>, token: u32, k: usize) -> f64 {
        let masses: Vec<f64> = (0..self.vocab.n_categories())
            .map(|c| self.vocab.tokens_of_category(c).map(|t| row[t as usize].to_f64_lossy()).sum())
            .collect();
        let c = self.vocab.category_of_token(token);
        let mc = masses[c];
        let ahead = masses.iter().enumerate().filter(|&(j, &m)| m > mc || (m == mc && j < c)).count();
        if ahead < k {
            mc
        } else {
            0.0
        }
    }

    /// Scores every sentence with `workers` threads. Results are in input
    /// order and identical to sequential scoring; a failing sentence yields
    /// an error tagged with its index without stopping the rest.
    pub fn score_batch(
        &self,
        sentences: &[TokenSequence],
        variant: Variant,
        k: usize,
        workers: usize,
    ) -> Result<Vec<Result<ConsistencyReport, ScoreError>>, ScoreError> {
        let run = || {
            sentences
                .par_iter()
                .enumerate()
                .map(|(index, s)| {
                    self.score(s, variant, k).map_err(|e| ScoreError::AtIndex { index, source: Box::new(e) })
                })
                .collect()
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| ScoreError::Pool(e.to_string()))?;
        Ok(pool.install(run))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene_lang::GridSpec;

    fn setup(n_cats: usize) -> (ModelParameters<f64>, Vocabulary) {
        let vocab =
            Vocabulary::new((0..n_cats).map(|i| format!("c{i}")).collect(), GridSpec::new(2, 2).unwrap()).unwrap();
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            hidden_dim: 16,
            ffn_dim: 32,
            max_seq_len: 8,
            seed: 7,
            ..ModelConfig::new(vocab.size())
        };
        (ModelParameters::init(&cfg).unwrap(), vocab)
    }

    /// Head that puts logit `value` on `token` and zero elsewhere, so the
    /// output ignores the encoder entirely.
    fn pin_token(p: &mut ModelParameters<f64>, token: usize, logit: f64) {
        p.tensor_mut("head.w").unwrap().fill(0.0);
        let b = p.tensor_mut("head.b").unwrap();
        b.fill(0.0);
        b[token] = logit;
    }

    #[test]
    fn single_token_score_is_its_probability() {
        let (mut p, vocab) = setup(3);
        // 12 object tokens; choose logit so token 5 gets probability 0.7.
        let logit = (0.7f64 * 11.0 / 0.3).ln();
        pin_token(&mut p, 5, logit);
        let s = SceneScorer::new(&p, &vocab).unwrap();
        let r = s.strict(&TokenSequence(vec![5]), s.full_k()).unwrap();
        assert!((r.score - 0.7).abs() < 1e-12);
        assert_eq!(r.per_position.len(), 1);
    }

    #[test]
    fn score_is_min_of_positions() {
        let (p, vocab) = setup(3);
        let s = SceneScorer::new(&p, &vocab).unwrap();
        for variant in [Variant::Strict, Variant::Relax] {
            let r = s.score(&TokenSequence(vec![2, 7, 13]), variant, s.full_k()).unwrap();
            let min = r.per_position.iter().map(|p| p.confidence).fold(f64::INFINITY, f64::min);
            assert_eq!(r.score, min);
            assert!((0.0..=1.0).contains(&r.score));
            assert_eq!(r.per_position.len(), 3);
        }
    }

    #[test]
    fn relax_dominates_strict() {
        let (p, vocab) = setup(3);
        let s = SceneScorer::new(&p, &vocab).unwrap();
        let toks = TokenSequence(vec![3, 4, 9, 12]);
        let a = s.strict(&toks, s.full_k()).unwrap();
        let b = s.relax(&toks, s.full_k()).unwrap();
        for (x, y) in a.per_position.iter().zip(&b.per_position) {
            assert!(y.confidence >= x.confidence);
        }
    }

    #[test]
    fn single_category_relax_is_one() {
        let (p, vocab) = setup(1);
        let s = SceneScorer::new(&p, &vocab).unwrap();
        let r = s.relax(&TokenSequence(vec![2, 4, 5]), s.full_k()).unwrap();
        for pp in &r.per_position {
            assert!((pp.confidence - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn k_one_zeroes_non_argmax() {
        let (mut p, vocab) = setup(3);
        pin_token(&mut p, 6, 3.0);
        let s = SceneScorer::new(&p, &vocab).unwrap();
        let r = s.strict(&TokenSequence(vec![6, 8]), 1).unwrap();
        assert!(r.per_position[0].confidence > 0.0);
        assert_eq!(r.per_position[1].confidence, 0.0);
        assert_eq!(r.score, 0.0);
        assert_eq!(r.argmin(), Some(1));
    }

    #[test]
    fn score_is_monotone_in_k() {
        let (p, vocab) = setup(3);
        let s = SceneScorer::new(&p, &vocab).unwrap();
        let toks = TokenSequence(vec![2, 5, 11, 13]);
        for variant in [Variant::Strict, Variant::Relax] {
            let mut prev = 0.0;
            for k in 1..=12 {
                let r = s.score(&toks, variant, k).unwrap();
                assert!(r.score >= prev);
                prev = r.score;
            }
        }
    }

    #[test]
    fn errors() {
        let (p, vocab) = setup(3);
        let s = SceneScorer::new(&p, &vocab).unwrap();
        assert!(matches!(s.strict(&TokenSequence(vec![]), 5), Err(ScoreError::Empty)));
        assert!(matches!(s.strict(&TokenSequence(vec![2]), 0), Err(ScoreError::ZeroK)));
        let (_, other) = setup(4);
        assert!(SceneScorer::new(&p, &other).is_err());
    }

    #[test]
    fn batch_is_ordered_and_worker_independent() {
        let (p, vocab) = setup(3);
        let s = SceneScorer::new(&p, &vocab).unwrap();
        let sentences: Vec<TokenSequence> =
            (0..40).map(|i| TokenSequence((0..(i % 4)).map(|j| 2 + ((i * 3 + j * 5) % 12) as u32).collect())).collect();
        let one = s.score_batch(&sentences, Variant::Strict, s.full_k(), 1).unwrap();
        let many = s.score_batch(&sentences, Variant::Strict, s.full_k(), 8).unwrap();
        assert_eq!(one.len(), 40);
        for (i, (a, b)) in one.iter().zip(&many).enumerate() {
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    assert_eq!(a, b);
                    assert_eq!(a.sentence, sentences[i]);
                }
                (Err(ScoreError::AtIndex { index, .. }), Err(_)) => {
                    assert_eq!(*index, i);
                    assert!(sentences[i].is_empty());
                }
                other => panic!("mismatch at {i}: {other:?}"),
            }
        }
    }

    #[test]
    fn report_lines_round_trip() {
        let (p, vocab) = setup(3);
        let s = SceneScorer::new(&p, &vocab).unwrap();
        let r = s.strict(&TokenSequence(vec![2, 9]), s.full_k()).unwrap();
        let line = r.to_line("img-1");
        let mut buf = Vec::new();
        write_report_lines(&mut buf, std::slice::from_ref(&line)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"scene_id\":\"img-1\",\"variant\":\"strict\",\"k\":12,\"score\":"));
        let back = read_report_lines(&buf[..]).unwrap();
        assert_eq!(back, vec![line]);
    }
}
