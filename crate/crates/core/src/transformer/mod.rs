//! Dual-stream decoder-only transformer with in-batch attention.

mod attention;
mod block;
mod fused;
mod weights;

use serde::{Deserialize, Serialize};

use crate::corpus::VOCAB_SIZE;
use crate::error::{Error, Result};

pub use attention::{
    causal_mask, causal_self_attention, cross_doc_attention, v_normalize, weighted_aggregate, CrossAttention,
    SelfAttention,
};
pub use block::{
    causal_block, causal_hidden, causal_logits, embed, in_batch_block_forward, lm_forward, lm_states,
    next_token_targets, project_logits, valid_mask, DualStreamState, KvCache, LmOutput,
};
pub use fused::fused_mask_forward;
pub use weights::{LayerWeights, TransformerWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Stabilizer added to the V-normalization denominator.
    pub epsilon: f64,
    pub v_normalization_enabled: bool,
    pub init_std: f64,
    /// Test hook: drop the cross-document term from the h-stream.
    #[serde(skip)]
    pub zero_cross_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 160,
            epsilon: 1e-6,
            v_normalization_enabled: true,
            init_std: 0.02,
            zero_cross_attention: false,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return bad("model extents must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        Ok(())
    }
}
