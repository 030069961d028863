use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transformer::{loss_and_grads, predict_masked, Dropout, FlatBatch};
use super::{MaskVector, ModelError, ModelParameters, Real};
use crate::scene_lang::TokenSequence;

/// Masked-token cross-entropy, averaged over every masked position in the
/// batch, and its exact gradient. `dropout_seed` enables dropout with the
/// configured probability; `None` runs deterministically without it.
pub fn mlm_loss_and_grads<F: Real>(
    params: &ModelParameters<F>,
    batch: &[(&[u32], &MaskVector)],
    dropout_seed: Option<u64>,
) -> Result<(F, ModelParameters<F>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Usage("empty batch".into()));
    }
    if let Some(i) = batch.iter().position(|(_, m)| m.masked_positions().next().is_none()) {
        return Err(ModelError::Usage(format!("example {i} has no masked position")));
    }
    let flat = FlatBatch::new(params, batch)?;
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let dropout = rng.as_mut().map(|rng| Dropout { prob: params.config().dropout_prob, rng });
    Ok(loss_and_grads(params, &flat, dropout))
}

/// Mean negative log-likelihood of every token when it alone is masked,
/// over all positions of all sentences. Sentences longer than
/// `max_seq_len` are rejected.
pub fn masked_nll<F: Real>(params: &ModelParameters<F>, corpus: &[TokenSequence]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in corpus.chunks(64) {
        let masks: Vec<Vec<MaskVector>> =
            chunk.iter().map(|s| (0..s.len()).map(|i| MaskVector::single(s.len(), i)).collect()).collect();
        let examples: Vec<(&[u32], &MaskVector)> =
            chunk.iter().zip(&masks).flat_map(|(s, ms)| ms.iter().map(move |m| (s.as_slice(), m))).collect();
        if examples.is_empty() {
            continue;
        }
        let dists = predict_masked(params, &examples)?;
        let targets = chunk.iter().flat_map(|s| s.as_slice().iter().copied());
        for (row, t) in dists.rows().into_iter().zip(targets) {
            total -= row[t as usize].to_f64_lossy().ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::Usage("no tokens to evaluate".into()));
    }
    Ok(total / count as f64)
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState<F = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<F>,
    v: Vec<F>,
}

impl<F: Real> OptimizerState<F> {
    /// Adam with lr 1e-3, betas (0.9, 0.999), eps 1e-8.
    pub fn adam(params: &ModelParameters<F>) -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![F::zero(); params.len()],
            v: vec![F::zero(); params.len()],
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn update(&mut self, params: &mut ModelParameters<F>, grads: &ModelParameters<F>) {
        assert_eq!(params.len(), self.m.len(), "optimizer state does not match parameters");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let c1 = F::of(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = F::of(1.0 / (1.0 - self.beta2.powi(t)));
        let (lr, eps) = (F::of(self.lr), F::of(self.eps));
        let it = params.as_mut_slice().iter_mut().zip(grads.as_slice()).zip(self.m.iter_mut().zip(&mut self.v));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let mhat = *m * c1;
            let vhat = *v * c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Dropout during training; the probability comes from the model config.
    pub dropout: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, seed: 0, dropout: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub truncated: usize,
}

/// Masked-token training with dynamic masking: every epoch reshuffles the
/// corpus and masks one uniformly chosen position per sentence.
pub fn train<F: Real>(
    params: &mut ModelParameters<F>,
    opt: &mut OptimizerState<F>,
    corpus: &[TokenSequence],
    opts: &TrainOptions,
) -> Result<TrainReport, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::Usage("empty training corpus".into()));
    }
    if opts.batch_size == 0 {
        return Err(ModelError::Usage("batch size must be positive".into()));
    }
    if let Some(i) = corpus.iter().position(TokenSequence::is_empty) {
        return Err(ModelError::Usage(format!("training sentence {i} is empty")));
    }
    let max_len = params.config().max_seq_len;
    let truncated = corpus.iter().filter(|s| s.len() > max_len).count();
    if truncated > 0 {
        log::warn!("truncating {truncated} training sentences to max_seq_len {max_len}");
    }
    let sentences: Vec<&[u32]> = corpus.iter().map(|s| &s.as_slice()[..s.len().min(max_len)]).collect();

    let mut order_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let drop_prob = params.config().dropout_prob;
    let mut report = TrainReport { truncated, ..Default::default() };
    let mut order: Vec<usize> = (0..sentences.len()).collect();

    for epoch in 0..opts.epochs {
        order.shuffle(&mut order_rng);
        let masks: Vec<MaskVector> = order
            .iter()
            .map(|&i| MaskVector::single(sentences[i].len(), order_rng.random_range(0..sentences[i].len())))
            .collect();
        let mut total = 0.0;
        let mut n_batches = 0usize;
        for (idx, masks) in order.chunks(opts.batch_size).zip(masks.chunks(opts.batch_size)) {
            let examples: Vec<(&[u32], &MaskVector)> = idx.iter().map(|&i| sentences[i]).zip(masks).collect();
            let flat = FlatBatch::new(params, &examples)?;
            let dropout = (opts.dropout && drop_prob > 0.0).then_some(Dropout { prob: drop_prob, rng: &mut drop_rng });
            let (loss, grads) = loss_and_grads(params, &flat, dropout);
            opt.update(params, &grads);
            total += loss.to_f64_lossy() * examples.len() as f64;
            n_batches += 1;
            report.steps += 1;
        }
        let mean = total / sentences.len() as f64;
        log::info!("epoch {}/{}: loss {mean:.4} ({n_batches} batches)", epoch + 1, opts.epochs);
        if !mean.is_finite() {
            return Err(ModelError::Usage(format!("training diverged at epoch {}", epoch + 1)));
        }
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
