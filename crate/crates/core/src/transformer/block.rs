use super::attention::{causal_self_attention, cross_doc_attention, v_normalize, weighted_aggregate};
use super::{LayerWeights, ModelConfig, TransformerWeights};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Var};

/// Activations of every document of a batch at one layer boundary.
#[derive(Debug, Clone)]
pub struct DualStreamState {
    /// Self-only stream; supplies keys and values to other documents.
    pub e: Vec<Var>,
    /// Batch-conditioned stream; carries the language-modeling loss.
    pub h: Vec<Var>,
    /// `valid[i][t]` is false at padding positions.
    pub valid: Vec<Vec<bool>>,
}

impl DualStreamState {
    pub fn batch_size(&self) -> usize {
        self.e.len()
    }
}

/// Per-head keys and values from an e-stream self-attention.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

pub fn valid_mask(tokens: &[u32]) -> Vec<bool> {
    tokens.iter().map(|&t| t != PAD).collect()
}

/// Token plus absolute position embeddings.
pub fn embed(tape: &mut Tape, w: &TransformerWeights<Var>, tokens: &[u32], cfg: &ModelConfig) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = tape.embedding(w.tok_emb, &ids);
    let pos = tape.embedding(w.pos_emb, &positions);
    Ok(tape.add(tok, pos))
}

fn feed_forward(tape: &mut Tape, layer: &LayerWeights<Var>, x: Var) -> Var {
    let a = tape.layernorm(x, layer.ln2_gain, layer.ln2_bias);
    let hidden = tape.matmul(a, layer.ff_in);
    let hidden = tape.add_row(hidden, layer.ff_in_bias);
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, layer.ff_out);
    let out = tape.add_row(out, layer.ff_out_bias);
    tape.add(x, out)
}

/// One standard pre-norm causal block. Returns the next activations and the
/// keys/values used, which are what other documents attend to.
pub fn causal_block(
    tape: &mut Tape,
    layer: &LayerWeights<Var>,
    x: Var,
    valid: &[bool],
    cfg: &ModelConfig,
) -> Result<(Var, KvCache)> {
    let a = tape.layernorm(x, layer.ln1_gain, layer.ln1_bias);
    let attn = causal_self_attention(tape, layer, a, valid, cfg)?;
    let proj = tape.matmul(attn.context, layer.wo);
    let mid = tape.add(x, proj);
    let out = feed_forward(tape, layer, mid);
    Ok((
        out,
        KvCache {
            keys: attn.keys,
            values: attn.values,
        },
    ))
}

fn check_batch(valid: &[Vec<bool>]) -> Result<()> {
    if valid.len() < 2 {
        return Err(Error::BatchTooSmall(valid.len()));
    }
    if let Some(i) = valid.iter().position(|v| !v.iter().any(|&x| x)) {
        return Err(Error::FullyPadded(i));
    }
    Ok(())
}

/// One layer of in-batch attention over the whole batch.
///
/// The e-stream runs an ordinary causal block. The h-stream combines causal
/// attention over its own prefix with attention over every other document's
/// cached e-stream keys and values, V-normalized and weighted by row `i` of
/// `sim`, then shares the output projection and feed-forward with the
/// e-stream.
pub fn in_batch_block_forward(
    tape: &mut Tape,
    layer: &LayerWeights<Var>,
    state: &DualStreamState,
    sim: Var,
    cfg: &ModelConfig,
) -> Result<DualStreamState> {
    check_batch(&state.valid)?;
    let b = state.batch_size();
    if tape.shape(sim) != [b, b] {
        return Err(Error::LengthMismatch {
            expected: b * b,
            got: tape.value(sim).len(),
        });
    }

    let mut e_next = Vec::with_capacity(b);
    let mut caches = Vec::with_capacity(b);
    for i in 0..b {
        let (out, cache) = causal_block(tape, layer, state.e[i], &state.valid[i], cfg)?;
        e_next.push(out);
        caches.push(cache);
    }

    let mut h_next = Vec::with_capacity(b);
    for i in 0..b {
        let a = tape.layernorm(state.h[i], layer.ln1_gain, layer.ln1_bias);
        let own = causal_self_attention(tape, layer, a, &state.valid[i], cfg)?;
        let mut mixed = own.context;
        if !cfg.zero_cross_attention {
            let others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
            let mut terms = Vec::with_capacity(others.len());
            for &j in &others {
                let heads = (0..cfg.n_heads)
                    .map(|hd| {
                        let c = cross_doc_attention(
                            tape,
                            own.queries[hd],
                            caches[j].keys[hd],
                            caches[j].values[hd],
                            &state.valid[j],
                            cfg.d_head(),
                        )
                        .map_err(|e| match e {
                            Error::FullyPadded(_) => Error::FullyPadded(j),
                            e => e,
                        })?;
                        Ok(if cfg.v_normalization_enabled {
                            v_normalize(tape, c.output, c.weights, caches[j].values[hd], cfg.epsilon)
                        } else {
                            c.output
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                terms.push(tape.concat_cols(&heads));
            }
            let entries: Vec<usize> = others.iter().map(|&j| i * b + j).collect();
            let cross = weighted_aggregate(tape, &terms, sim, &entries)?;
            mixed = tape.add(mixed, cross);
        }
        let proj = tape.matmul(mixed, layer.wo);
        let mid = tape.add(state.h[i], proj);
        h_next.push(feed_forward(tape, layer, mid));
    }

    Ok(DualStreamState {
        e: e_next,
        h: h_next,
        valid: state.valid.clone(),
    })
}

/// Logits of both streams, one `L_i×vocab` matrix per document.
#[derive(Debug, Clone)]
pub struct LmOutput {
    pub h_logits: Vec<Var>,
    pub e_logits: Vec<Var>,
}

/// Final-layer activations of both streams (before the final norm).
pub fn lm_states(
    tape: &mut Tape,
    w: &TransformerWeights<Var>,
    batch: &[Vec<u32>],
    sim: Var,
    cfg: &ModelConfig,
) -> Result<DualStreamState> {
    let valid: Vec<Vec<bool>> = batch.iter().map(|t| valid_mask(t)).collect();
    check_batch(&valid)?;
    let mut e = Vec::with_capacity(batch.len());
    for tokens in batch {
        e.push(embed(tape, w, tokens, cfg)?);
    }
    let mut state = DualStreamState {
        h: e.clone(),
        e,
        valid,
    };
    for layer in &w.layers {
        state = in_batch_block_forward(tape, layer, &state, sim, cfg)?;
    }
    Ok(state)
}

/// Final norm followed by the tied output projection.
pub fn project_logits(tape: &mut Tape, w: &TransformerWeights<Var>, x: Var, emb_t: Var) -> Var {
    let n = tape.layernorm(x, w.lnf_gain, w.lnf_bias);
    tape.matmul(n, emb_t)
}

/// Batch-conditioned language model forward pass.
pub fn lm_forward(
    tape: &mut Tape,
    w: &TransformerWeights<Var>,
    batch: &[Vec<u32>],
    sim: Var,
    cfg: &ModelConfig,
) -> Result<LmOutput> {
    let state = lm_states(tape, w, batch, sim, cfg)?;
    let emb_t = tape.transpose(w.tok_emb);
    let h_logits = state.h.iter().map(|&x| project_logits(tape, w, x, emb_t)).collect();
    let e_logits = state.e.iter().map(|&x| project_logits(tape, w, x, emb_t)).collect();
    Ok(LmOutput { h_logits, e_logits })
}

/// Single-stream causal pass; returns final-normed hidden states `L×d`.
pub fn causal_hidden(tape: &mut Tape, w: &TransformerWeights<Var>, tokens: &[u32], cfg: &ModelConfig) -> Result<Var> {
    let valid = valid_mask(tokens);
    if !valid.iter().any(|&v| v) {
        return Err(Error::FullyPadded(0));
    }
    let mut x = embed(tape, w, tokens, cfg)?;
    for layer in &w.layers {
        x = causal_block(tape, layer, x, &valid, cfg)?.0;
    }
    Ok(tape.layernorm(x, w.lnf_gain, w.lnf_bias))
}

/// Single-stream causal language model logits, `L×vocab`.
pub fn causal_logits(tape: &mut Tape, w: &TransformerWeights<Var>, tokens: &[u32], cfg: &ModelConfig) -> Result<Var> {
    let hidden = causal_hidden(tape, w, tokens, cfg)?;
    let emb_t = tape.transpose(w.tok_emb);
    Ok(tape.matmul(hidden, emb_t))
}

/// Next-token targets for one document: position `t` predicts `t+1`; the
/// last position and padding targets are ignored.
pub fn next_token_targets(tokens: &[u32]) -> Vec<Option<usize>> {
    (0..tokens.len())
        .map(|t| match tokens.get(t + 1) {
            Some(&next) if next != PAD => Some(next as usize),
            _ => None,
        })
        .collect()
}
