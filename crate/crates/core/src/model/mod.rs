//! Bidirectional masked-token transformer over SCENE-Lang tokens.
//!
//! The encoder is a stack of post-norm blocks (self-attention, add & norm,
//! GELU feed-forward, add & norm) over summed token and learned position
//! embeddings, followed by a linear output head. Gradients are derived by
//! hand; everything is generic over `f32` and `f64` so the backward pass can
//! be checked against finite differences in double precision.

mod checkpoint;
mod params;
mod train;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC};
pub use params::{param_count, ModelParameters, ParamEntry};
pub use train::{masked_nll, mlm_loss_and_grads, train, OptimizerState, TrainOptions, TrainReport};
pub use transformer::{confidence, forward, predict_masked, top_k_contains};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("token sequence has {tokens} entries but mask has {mask}")]
    MaskLength { tokens: usize, mask: usize },
    #[error("token {token} is not an object token for vocabulary size {vocab}")]
    Token { token: u32, vocab: usize },
    #[error("usage: {0}")]
    Usage(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Floating-point element type of model parameters and activations.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite constant")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Applied to embeddings and both sublayer outputs during training only.
    pub dropout_prob: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Six layers, twelve heads, width 96.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            n_layers: 6,
            n_heads: 12,
            hidden_dim: 96,
            ffn_dim: 4 * 96,
            max_seq_len: 64,
            vocab_size,
            dropout_prob: 0.1,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            return err("layer count, head count and dimensions must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return err(format!("hidden_dim {} not divisible by n_heads {}", self.hidden_dim, self.n_heads));
        }
        if self.max_seq_len == 0 {
            return err("max_seq_len must be positive".into());
        }
        if self.vocab_size < 3 {
            return err(format!("vocab_size {} leaves no object tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return err(format!("dropout_prob {} not in [0, 1)", self.dropout_prob));
        }
        Ok(())
    }
}

/// Per-position visibility flags: `0` masks the position, `1` leaves it visible.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskVector(pub Vec<u8>);

impl MaskVector {
    pub fn visible(n: usize) -> Self {
        Self(vec![1; n])
    }

    /// Everything visible except position `i`.
    pub fn single(n: usize, i: usize) -> Self {
        let mut m = Self::visible(n);
        m.0[i] = 0;
        m
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.0[i] == 0
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &m)| m == 0).map(|(i, _)| i)
    }
}
