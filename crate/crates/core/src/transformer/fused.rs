//! Inference path that lays both streams of every document out as one long
//! duplicated sequence and expresses in-batch attention as a block mask over
//! it, instead of looping over document pairs.
//!
//! Row blocks are `[e_0 .. e_{B-1}, h_0 .. h_{B-1}]`, each padded to the
//! longest document. The mask assigns every (query, key) pair to a softmax
//! segment: an e-row's only segment is its own causal prefix; an h-row has
//! its own causal prefix plus one full segment per other document's e-block.
//! Cross segments are then rescaled by similarity and V-normalization before
//! a single value product.

use super::{causal_mask, ModelConfig, TransformerWeights};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::numkernel::kernels::{gelu, l2_norm, layernorm_row, matmul, softmax_slice};
use crate::numkernel::Tensor;

fn layernorm(x: &[f64], d: usize, gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        layernorm_row(xr, or);
        for ((o, g), b) in or.iter_mut().zip(gain.data()).zip(bias.data()) {
            *o = *o * g + b;
        }
    }
    out
}

fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Same outputs as [`lm_forward`](super::lm_forward) (values only):
/// `(h_logits, e_logits)` per document, each `L_i×vocab`.
pub fn fused_mask_forward(
    w: &TransformerWeights<Tensor>,
    batch: &[Vec<u32>],
    sim: &Tensor,
    cfg: &ModelConfig,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if sim.shape() != [b, b] {
        return Err(Error::LengthMismatch {
            expected: b * b,
            got: sim.len(),
        });
    }
    let len = batch.iter().map(Vec::len).max().unwrap_or(0);
    for (i, doc) in batch.iter().enumerate() {
        if doc.is_empty() {
            return Err(Error::EmptySequence);
        }
        if doc.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: doc.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = doc.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        if doc.iter().all(|&t| t == PAD) {
            return Err(Error::FullyPadded(i));
        }
    }
    for i in 0..b {
        let row: f64 = (0..b).filter(|&j| j != i).map(|j| sim.at(i, j)).sum();
        if (row - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized(row));
        }
    }

    let d = cfg.d_model;
    let dh = cfg.d_head();
    let blocks = 2 * b;
    let rows = blocks * len;
    let padded: Vec<Vec<u32>> = batch
        .iter()
        .map(|doc| {
            let mut p = doc.clone();
            p.resize(len, PAD);
            p
        })
        .collect();
    let valid: Vec<Vec<bool>> = padded.iter().map(|p| p.iter().map(|&t| t != PAD).collect()).collect();
    let self_masks: Vec<Vec<bool>> = valid.iter().map(|v| causal_mask(v)).collect();

    let mut x = vec![0.0; rows * d];
    for blk in 0..blocks {
        let doc = &padded[blk % b];
        for (t, &tok) in doc.iter().enumerate() {
            let row = &mut x[(blk * len + t) * d..(blk * len + t + 1) * d];
            for ((o, e), p) in row.iter_mut().zip(w.tok_emb.row(tok as usize)).zip(w.pos_emb.row(t)) {
                *o = e + p;
            }
        }
    }

    let scale = 1.0 / (dh as f64).sqrt();
    for layer in &w.layers {
        let a = layernorm(&x, d, &layer.ln1_gain, &layer.ln1_bias);
        let q = matmul(&a, layer.wq.data(), rows, d, d);
        let k = matmul(&a, layer.wk.data(), rows, d, d);
        let v = matmul(&a, layer.wv.data(), rows, d, d);
        let head = |m: &[f64], r: usize, h: usize| -> Vec<f64> { m[r * d + h * dh..r * d + (h + 1) * dh].to_vec() };

        let mut context = vec![0.0; rows * d];
        for h in 0..cfg.n_heads {
            let vnorm: Vec<f64> = (0..rows).map(|r| l2_norm(&head(&v, r, h))).collect();
            for blk in 0..blocks {
                let (is_h, i) = (blk >= b, blk % b);
                for t in 0..len {
                    let r = blk * len + t;
                    let qr = head(&q, r, h);
                    let score = |c: usize| -> f64 {
                        qr.iter().zip(&k[c * d + h * dh..c * d + (h + 1) * dh]).map(|(x, y)| x * y).sum::<f64>() * scale
                    };
                    // Own causal segment; same block.
                    let own_cols: Vec<usize> = (0..len).map(|u| blk * len + u).collect();
                    let own_scores: Vec<f64> = own_cols.iter().map(|&c| score(c)).collect();
                    let mut own_p = vec![0.0; len];
                    softmax_slice(&own_scores, Some(&self_masks[i][t * len..(t + 1) * len]), &mut own_p);
                    let mut weights: Vec<(usize, f64)> = own_cols.into_iter().zip(own_p).collect();

                    if is_h && !cfg.zero_cross_attention {
                        for j in (0..b).filter(|&j| j != i) {
                            let cols: Vec<usize> = (0..len).map(|u| j * len + u).collect();
                            let s: Vec<f64> = cols.iter().map(|&c| score(c)).collect();
                            let mut p = vec![0.0; len];
                            softmax_slice(&s, Some(&valid[j]), &mut p);
                            let factor = if cfg.v_normalization_enabled {
                                let n: f64 = cols.iter().zip(&p).map(|(&c, pc)| pc * vnorm[c]).sum();
                                sim.at(i, j) / (n + cfg.epsilon)
                            } else {
                                sim.at(i, j)
                            };
                            weights.extend(cols.into_iter().zip(p.into_iter().map(|pc| pc * factor)));
                        }
                    }

                    let out = &mut context[r * d + h * dh..r * d + (h + 1) * dh];
                    for (c, wt) in weights {
                        if wt == 0.0 {
                            continue;
                        }
                        for (o, vv) in out.iter_mut().zip(&v[c * d + h * dh..c * d + (h + 1) * dh]) {
                            *o += wt * vv;
                        }
                    }
                }
            }
        }

        let proj = matmul(&context, layer.wo.data(), rows, d, d);
        for (xi, p) in x.iter_mut().zip(&proj) {
            *xi += p;
        }
        let a2 = layernorm(&x, d, &layer.ln2_gain, &layer.ln2_bias);
        let mut hidden = matmul(&a2, layer.ff_in.data(), rows, d, cfg.d_ff);
        add_bias(&mut hidden, layer.ff_in_bias.data());
        hidden.iter_mut().for_each(|z| *z = gelu(*z));
        let mut ff = matmul(&hidden, layer.ff_out.data(), rows, cfg.d_ff, d);
        add_bias(&mut ff, layer.ff_out_bias.data());
        for (xi, f) in x.iter_mut().zip(&ff) {
            *xi += f;
        }
    }

    let normed = layernorm(&x, d, &w.lnf_gain, &w.lnf_bias);
    let vocab = cfg.vocab_size;
    let emb_t = crate::numkernel::kernels::transpose(w.tok_emb.data(), vocab, d);
    let mut e_logits = Vec::with_capacity(b);
    let mut h_logits = Vec::with_capacity(b);
    for blk in 0..blocks {
        let li = batch[blk % b].len();
        let start = blk * len * d;
        let logits = matmul(&normed[start..start + li * d], &emb_t, li, d, vocab);
        let t = Tensor::new(&[li, vocab], logits);
        if blk < b {
            e_logits.push(t);
        } else {
            h_logits.push(t);
        }
    }
    Ok((h_logits, e_logits))
}
