//! Attention primitives: causal self-attention, cross-document attention over
//! cached keys and values, V-normalization and similarity-weighted
//! aggregation.

use super::{LayerWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Var};

/// Result of causal self-attention over one document.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    /// Concatenated head outputs, `L×d_model`, before the output projection.
    pub context: Var,
    /// Per-head queries, `L×d_head` each.
    pub queries: Vec<Var>,
    /// Per-head keys and values, kept for cross-document attention.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    /// `b_ij`, `L_i×d_head`.
    pub output: Var,
    /// Softmax weights that produced `output`, `L_i×L_j`.
    pub weights: Var,
}

fn split_heads(tape: &mut Tape, x: Var, cfg: &ModelConfig) -> Vec<Var> {
    let dh = cfg.d_head();
    (0..cfg.n_heads)
        .map(|h| tape.slice_cols(x, h * dh..(h + 1) * dh))
        .collect()
}

/// Causal mask: query `t` sees key `s` iff `s <= t` and `s` is not padding.
/// A padding query keeps its own position so its row is never empty.
pub fn causal_mask(valid: &[bool]) -> Vec<bool> {
    let n = valid.len();
    let mut mask = vec![false; n * n];
    for t in 0..n {
        for s in 0..=t {
            mask[t * n + s] = valid[s] || s == t;
        }
    }
    mask
}

/// Multi-head causal self-attention with the layer's shared projections.
pub fn causal_self_attention(
    tape: &mut Tape,
    layer: &LayerWeights<Var>,
    x: Var,
    valid: &[bool],
    cfg: &ModelConfig,
) -> Result<SelfAttention> {
    let len = tape.shape(x)[0];
    if valid.len() != len {
        return Err(Error::LengthMismatch {
            expected: len,
            got: valid.len(),
        });
    }
    if len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: cfg.max_seq_len,
        });
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::FullyPadded(0));
    }
    let q = tape.matmul(x, layer.wq);
    let k = tape.matmul(x, layer.wk);
    let v = tape.matmul(x, layer.wv);
    let queries = split_heads(tape, q, cfg);
    let keys = split_heads(tape, k, cfg);
    let values = split_heads(tape, v, cfg);
    let mask = causal_mask(valid);
    let scale = 1.0 / (cfg.d_head() as f64).sqrt();
    let heads: Vec<Var> = (0..cfg.n_heads)
        .map(|h| {
            let kt = tape.transpose(keys[h]);
            let scores = tape.matmul(queries[h], kt);
            let scores = tape.scale(scores, scale);
            let p = tape.masked_softmax(scores, &mask);
            tape.matmul(p, values[h])
        })
        .collect();
    let context = tape.concat_cols(&heads);
    Ok(SelfAttention {
        context,
        queries,
        keys,
        values,
    })
}

/// Full (non-causal) attention of one head's queries from document `i` over
/// document `j`'s cached keys and values; padded keys of `j` are excluded.
pub fn cross_doc_attention(
    tape: &mut Tape,
    query: Var,
    key: Var,
    value: Var,
    valid_j: &[bool],
    d_head: usize,
) -> Result<CrossAttention> {
    let li = tape.shape(query)[0];
    let lj = tape.shape(key)[0];
    if valid_j.len() != lj {
        return Err(Error::LengthMismatch {
            expected: lj,
            got: valid_j.len(),
        });
    }
    if !valid_j.iter().any(|&v| v) {
        return Err(Error::FullyPadded(0));
    }
    let kt = tape.transpose(key);
    let scores = tape.matmul(query, kt);
    let scores = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
    let mask: Vec<bool> = (0..li).flat_map(|_| valid_j.iter().copied()).collect();
    let weights = tape.masked_softmax(scores, &mask);
    let output = tape.matmul(weights, value);
    Ok(CrossAttention { output, weights })
}

/// Divides each row of `b` by the attention-weighted mean of the value-row
/// norms, plus `epsilon`.
pub fn v_normalize(tape: &mut Tape, b: Var, weights: Var, value: Var, epsilon: f64) -> Var {
    let norms = tape.l2_norm_rows(value);
    let n = tape.matmul(weights, norms);
    let denom = tape.add_scalar(n, epsilon);
    tape.div_col(b, denom)
}

/// `Σ_k sim[entries[k]] · terms[k]`. The selected similarity entries must sum
/// to 1 within 1e-6.
pub fn weighted_aggregate(tape: &mut Tape, terms: &[Var], sim: Var, entries: &[usize]) -> Result<Var> {
    if terms.len() != entries.len() {
        return Err(Error::LengthMismatch {
            expected: entries.len(),
            got: terms.len(),
        });
    }
    if terms.is_empty() {
        return Err(Error::BatchTooSmall(1));
    }
    let total: f64 = entries.iter().map(|&e| tape.value(sim).data()[e]).sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized(total));
    }
    let mut acc = tape.scale_by(terms[0], sim, entries[0]);
    for (&t, &e) in terms.iter().zip(entries).skip(1) {
        let w = tape.scale_by(t, sim, e);
        acc = tape.add(acc, w);
    }
    Ok(acc)
}
