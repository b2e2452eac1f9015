//! The model abstraction driven by the profiler and the generation engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::TokenClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.num_layers * self.num_heads
    }

    /// `(layer, head)` pairs in layer-major order.
    pub fn head_ids(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_layers).flat_map(move |l| (0..self.num_heads).map(move |h| (l, h)))
    }
}

/// Query, key and value rows one head produces for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

/// A multi-head attention model as seen by the engine.
///
/// Heads are addressed by `(layer, head)`; a projection depends only on the
/// token and its position, so keys and values are cacheable.
pub trait Model: Sync {
    fn config(&self) -> &ModelConfig;

    fn token_class(&self, position: usize, token_id: u32) -> TokenClass;

    fn project(&self, layer: usize, head: usize, position: usize, token_id: u32) -> Result<Projection>;

    /// Next-token logits from the concatenated per-head attention outputs
    /// (layer-major, `head_dim` values per head).
    fn logits(&self, attention_outputs: &[f64]) -> Vec<f64>;

    /// Replay models dictate the token at `position` instead of sampling.
    fn forced_token(&self, _position: usize) -> Option<u32> {
        None
    }
}
