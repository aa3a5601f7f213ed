//! Independent reference implementations for the integration tests. Plain
//! loops over `Vec<f64>`; nothing here calls into the crate's math.
#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeMap;

use revela_core::numkernel::Tensor;
use revela_core::transformer::{LayerWeights, ModelConfig, TransformerWeights};

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let cols = *t.shape().last().unwrap();
        Self {
            rows: t.len() / cols,
            cols,
            data: t.data().to_vec(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    let n = x.cols as f64;
    for r in 0..x.rows {
        let mean: f64 = (0..x.cols).map(|c| x.get(r, c)).sum::<f64>() / n;
        let var: f64 = (0..x.cols).map(|c| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n;
        let sd = (var + 1e-5).sqrt();
        for c in 0..x.cols {
            out.set(r, c, (x.get(r, c) - mean) / sd * gain[c] + bias[c]);
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax_over(scores: &[f64], allowed: &[bool]) -> Vec<f64> {
    let m = scores
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scores
        .iter()
        .zip(allowed)
        .map(|(&s, &a)| if a { (s - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / z).collect()
}

fn head_cols(m: &Mat, h: usize, dh: usize) -> Mat {
    let mut out = Mat::zeros(m.rows, dh);
    for r in 0..m.rows {
        for c in 0..dh {
            out.set(r, c, m.get(r, h * dh + c));
        }
    }
    out
}

fn mlp(layer: &LayerWeights<Tensor>, x: &Mat) -> Mat {
    let a = layer_norm(x, layer.ln2_gain.data(), layer.ln2_bias.data());
    let mut hid = matmul(&a, &Mat::from_tensor(&layer.ff_in));
    for r in 0..hid.rows {
        for c in 0..hid.cols {
            let v = gelu(hid.get(r, c) + layer.ff_in_bias.data()[c]);
            hid.set(r, c, v);
        }
    }
    let mut out = matmul(&hid, &Mat::from_tensor(&layer.ff_out));
    for r in 0..out.rows {
        for c in 0..out.cols {
            out.set(r, c, x.get(r, c) + out.get(r, c) + layer.ff_out_bias.data()[c]);
        }
    }
    out
}

/// Attention of `q` (L_q×dh) over `k`,`v` (L_k×dh); `allowed(t, s)` gates
/// each pair. Returns the output and the weights.
fn attend(q: &Mat, k: &Mat, v: &Mat, allowed: impl Fn(usize, usize) -> bool) -> (Mat, Mat) {
    let dh = q.cols;
    let mut p = Mat::zeros(q.rows, k.rows);
    for t in 0..q.rows {
        let scores: Vec<f64> = (0..k.rows)
            .map(|s| (0..dh).map(|c| q.get(t, c) * k.get(s, c)).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let mask: Vec<bool> = (0..k.rows).map(|s| allowed(t, s)).collect();
        for (s, w) in softmax_over(&scores, &mask).into_iter().enumerate() {
            p.set(t, s, w);
        }
    }
    (matmul(&p, v), p)
}

/// One dual-stream layer written out directly from the definitions.
///
/// e-stream: pre-norm causal self-attention and MLP.
/// h-stream: own causal attention plus, for every other document j, full
/// attention over j's e-stream keys/values, each V-normalized
/// (`b / (Σ_s p_s ‖v_s‖ + ε)`), mixed with weights `sim[i][j]`, added to the
/// own-attention output before the shared output projection.
pub fn dual_layer_oracle(
    layer: &LayerWeights<Tensor>,
    e: &[Mat],
    h: &[Mat],
    valid: &[Vec<bool>],
    sim: &[Vec<f64>],
    cfg: &ModelConfig,
) -> (Vec<Mat>, Vec<Mat>) {
    let b = e.len();
    let dh = cfg.d_model / cfg.n_heads;
    let wq = Mat::from_tensor(&layer.wq);
    let wk = Mat::from_tensor(&layer.wk);
    let wv = Mat::from_tensor(&layer.wv);
    let wo = Mat::from_tensor(&layer.wo);
    let causal = |valid: &Vec<bool>| {
        let valid = valid.clone();
        move |t: usize, s: usize| s <= t && (valid[s] || s == t)
    };

    let mut e_keys = Vec::new();
    let mut e_vals = Vec::new();
    let mut e_out = Vec::new();
    for i in 0..b {
        let a = layer_norm(&e[i], layer.ln1_gain.data(), layer.ln1_bias.data());
        let (q, k, v) = (matmul(&a, &wq), matmul(&a, &wk), matmul(&a, &wv));
        let mut ctx = Mat::zeros(a.rows, cfg.d_model);
        for hd in 0..cfg.n_heads {
            let (o, _) = attend(&head_cols(&q, hd, dh), &head_cols(&k, hd, dh), &head_cols(&v, hd, dh), causal(&valid[i]));
            for r in 0..o.rows {
                for c in 0..dh {
                    ctx.set(r, hd * dh + c, o.get(r, c));
                }
            }
        }
        let proj = matmul(&ctx, &wo);
        let mut mid = e[i].clone();
        mid.data.iter_mut().zip(&proj.data).for_each(|(m, p)| *m += p);
        e_out.push(mlp(layer, &mid));
        e_keys.push(k);
        e_vals.push(v);
    }

    let mut h_out = Vec::new();
    for i in 0..b {
        let a = layer_norm(&h[i], layer.ln1_gain.data(), layer.ln1_bias.data());
        let (q, k, v) = (matmul(&a, &wq), matmul(&a, &wk), matmul(&a, &wv));
        let mut ctx = Mat::zeros(a.rows, cfg.d_model);
        for hd in 0..cfg.n_heads {
            let qh = head_cols(&q, hd, dh);
            let (own, _) = attend(&qh, &head_cols(&k, hd, dh), &head_cols(&v, hd, dh), causal(&valid[i]));
            for r in 0..a.rows {
                for c in 0..dh {
                    ctx.set(r, hd * dh + c, own.get(r, c));
                }
            }
            for j in (0..b).filter(|&j| j != i) {
                let kj = head_cols(&e_keys[j], hd, dh);
                let vj = head_cols(&e_vals[j], hd, dh);
                let vj_valid = valid[j].clone();
                let (bij, p) = attend(&qh, &kj, &vj, |_, s| vj_valid[s]);
                for r in 0..a.rows {
                    let denom = if cfg.v_normalization_enabled {
                        let mut n = 0.0;
                        for s in 0..vj.rows {
                            let norm = (0..dh).map(|c| vj.get(s, c).powi(2)).sum::<f64>().sqrt();
                            n += p.get(r, s) * norm;
                        }
                        n + cfg.epsilon
                    } else {
                        1.0
                    };
                    for c in 0..dh {
                        let cur = ctx.get(r, hd * dh + c);
                        ctx.set(r, hd * dh + c, cur + sim[i][j] * bij.get(r, c) / denom);
                    }
                }
            }
        }
        let proj = matmul(&ctx, &wo);
        let mut mid = h[i].clone();
        mid.data.iter_mut().zip(&proj.data).for_each(|(m, p)| *m += p);
        h_out.push(mlp(layer, &mid));
    }
    (e_out, h_out)
}

/// Model with every parameter (norm gains and biases included) drawn
/// uniformly from `[-scale, scale]`.
pub fn random_weights(cfg: &ModelConfig, rng: &mut impl rand::Rng, scale: f64) -> TransformerWeights<Tensor> {
    let mut w = TransformerWeights::init(cfg, &mut revela_core::rng::seeded(rng.random()));
    w.visit_mut(|name, t| {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
            if name.ends_with("gain") {
                *v += 1.0;
            }
        }
    });
    w
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Mat {
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Row-stochastic off-diagonal similarity with zero diagonal.
pub fn random_sim(b: usize, rng: &mut impl rand::Rng) -> Vec<Vec<f64>> {
    (0..b)
        .map(|i| {
            let raw: Vec<f64> = (0..b).map(|j| if i == j { 0.0 } else { rng.random_range(0.05..1.0) }).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

pub fn sim_tensor(sim: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(sim)
}

/// NDCG@k by definition: `Σ (2^g − 1)/log2(i + 2)` over the top k, divided by
/// the same sum for grades sorted descending.
pub fn ndcg_reference(ranking: &[String], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    let dcg = |grades: &[u32]| -> f64 {
        grades
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| ((1u64 << g) as f64 - 1.0) / ((i + 2) as f64).log2())
            .sum()
    };
    let got: Vec<u32> = ranking.iter().map(|d| *judged.get(d).unwrap_or(&0)).collect();
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        0.0
    } else {
        dcg(&got) / idcg
    }
}

pub fn recall_reference(ranking: &[String], judged: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let relevant: Vec<&String> = judged.iter().filter(|(_, &g)| g > 0).map(|(d, _)| d).collect();
    if relevant.is_empty() {
        return None;
    }
    let top = &ranking[..ranking.len().min(k)];
    let hit = relevant.iter().filter(|d| top.contains(d)).count();
    Some(hit as f64 / relevant.len() as f64)
}

/// `Σ_runs 1/(k + rank)` per document, sorted by score then id, cut at
/// `depth`.
pub fn rrf_reference(runs: &[Vec<String>], k: usize, depth: usize) -> Vec<(String, f64)> {
    let mut score: BTreeMap<String, f64> = BTreeMap::new();
    for run in runs {
        for (pos, d) in run.iter().enumerate() {
            *score.entry(d.clone()).or_default() += 1.0 / (k as f64 + pos as f64 + 1.0);
        }
    }
    let mut v: Vec<(String, f64)> = score.into_iter().collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    v.truncate(depth);
    v
}

/// Okapi BM25 by scanning every document for every query term.
pub fn bm25_reference(docs: &[(String, String)], query: &str, k1: f64, b: f64) -> BTreeMap<String, f64> {
    let tok = |s: &str| -> Vec<String> {
        s.split_whitespace().map(str::to_lowercase).collect()
    };
    let toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| tok(t)).collect();
    let n = docs.len() as f64;
    let avg = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut out = BTreeMap::new();
    for (di, (id, _)) in docs.iter().enumerate() {
        let mut s = 0.0;
        let mut matched = false;
        for term in tok(query) {
            let df = toks.iter().filter(|t| t.contains(&term)).count() as f64;
            let tf = toks[di].iter().filter(|w| **w == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            matched = true;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let len = toks[di].len() as f64;
            s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avg));
        }
        if matched {
            out.insert(id.clone(), s);
        }
    }
    out
}
