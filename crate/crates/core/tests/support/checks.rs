//! Property checks shared by the integration tests and the acceptance
//! report. Each returns a one-line summary on success and the first
//! violation otherwise.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use revela_core::baselines::{mean_row_kl, replug_loss, retriever_distribution, ReplugConfig, ReplugTrainer};
use revela_core::corpus::{Chunk, TrainingBatch, PAD};
use revela_core::evalretrieval::{ndcg_at_k, recall_at_k, rrf_fuse, RankedList};
use revela_core::numkernel::{Tape, Tensor};
use revela_core::retriever::{similarity_from_embeddings, Encoder, SimilarityMatrix};
use revela_core::rng;
use revela_core::training::ModelPair;
use revela_core::transformer::{
    cross_doc_attention, fused_mask_forward, in_batch_block_forward, lm_forward, v_normalize, DualStreamState, ModelConfig,
    TransformerWeights,
};

use super::{
    dual_layer_oracle, ndcg_reference, random_mat, random_sim, random_weights, recall_reference, rrf_reference, sim_tensor, Mat,
};

pub type Check = Result<String, String>;

fn tiny(d_model: usize, n_heads: usize, n_layers: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        n_heads,
        n_layers,
        d_ff: 2 * d_model,
        max_seq_len,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_doc(len: usize, r: &mut impl rand::Rng) -> Vec<u32> {
    (0..len).map(|_| r.random_range(0..256)).collect()
}

/// One dual-stream layer against the straight-line oracle.
pub fn equation_oracle(instances: usize) -> Check {
    let mut r = rng::seeded(20);
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let b = r.random_range(2..=4);
        let heads = [1, 2, 4][r.random_range(0..3)];
        let mut cfg = tiny(4 * heads, heads, 1, 8);
        cfg.v_normalization_enabled = inst % 4 != 3;
        cfg.epsilon = 10f64.powi(-r.random_range(1..=6));
        let w = random_weights(&cfg, &mut r, 0.5);
        let lens: Vec<usize> = (0..b).map(|_| r.random_range(1..=6)).collect();
        let valid: Vec<Vec<bool>> = lens
            .iter()
            .map(|&l| {
                let pad_from = if l > 2 && r.random_bool(0.3) { l - 1 } else { l };
                (0..l).map(|t| t < pad_from).collect()
            })
            .collect();
        let e: Vec<Mat> = lens.iter().map(|&l| random_mat(l, cfg.d_model, &mut r)).collect();
        let h: Vec<Mat> = lens.iter().map(|&l| random_mat(l, cfg.d_model, &mut r)).collect();
        let sim = random_sim(b, &mut r);

        let mut tape = Tape::new();
        let wv = w.bind(&mut tape);
        let to_var = |tape: &mut Tape, m: &Mat| tape.constant(Tensor::new(&[m.rows, m.cols], m.data.clone()));
        let state = DualStreamState {
            e: e.iter().map(|m| to_var(&mut tape, m)).collect(),
            h: h.iter().map(|m| to_var(&mut tape, m)).collect(),
            valid: valid.clone(),
        };
        let s = tape.constant(sim_tensor(&sim));
        let out = in_batch_block_forward(&mut tape, &wv.layers[0], &state, s, &cfg).map_err(|e| e.to_string())?;
        let (e_ref, h_ref) = dual_layer_oracle(&w.layers[0], &e, &h, &valid, &sim, &cfg);
        for i in 0..b {
            worst = worst.max(max_diff(tape.value(out.e[i]).data(), &e_ref[i].data));
            worst = worst.max(max_diff(tape.value(out.h[i]).data(), &h_ref[i].data));
        }
        if worst > 1e-10 {
            return Err(format!("instance {inst}: max elementwise difference {worst:e} > 1e-10"));
        }
    }
    Ok(format!("{instances} instances, max elementwise difference {worst:.2e}"))
}

fn weights_of(rows: &[Vec<f64>], tau: f64) -> Result<SimilarityMatrix, String> {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::from_rows(rows));
    let v = similarity_from_embeddings(&mut tape, z, z, tau).map_err(|e| e.to_string())?;
    Ok(SimilarityMatrix::from_tape(&tape, v, tau))
}

/// Row sums, zero diagonal, B=2 one-hot, small-τ argmax.
pub fn similarity_contract(trials: usize) -> Check {
    let mut r = rng::seeded(30);
    for trial in 0..trials {
        let b = r.random_range(2..=8);
        let d = r.random_range(2..=6);
        let rows: Vec<Vec<f64>> = (0..b).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let tau = [1e-4, 0.01, 0.05, 1.0, 10.0][trial % 5];
        let m = weights_of(&rows, tau)?;
        for i in 0..b {
            let row = m.weights.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(format!("trial {trial}: row {i} sums to {sum}"));
            }
            if row[i] != 0.0 {
                return Err(format!("trial {trial}: diagonal {i} is {}", row[i]));
            }
        }
        if b == 2 && (m.weights.data() != [0.0, 1.0, 1.0, 0.0]) {
            return Err(format!("trial {trial}: B=2 weights {:?} not one-hot", m.weights.data()));
        }

        let sharp = weights_of(&rows, 1e-6)?;
        for i in 0..b {
            let best = (0..b)
                .filter(|&j| j != i)
                .max_by(|&x, &y| sharp.raw.at(i, x).total_cmp(&sharp.raw.at(i, y)))
                .unwrap();
            let onehot: Vec<f64> = (0..b).map(|j| if j == best { 1.0 } else { 0.0 }).collect();
            let diff = max_diff(sharp.weights.row(i), &onehot);
            if diff > 1e-12 {
                return Err(format!("trial {trial}: τ=1e-6 row {i} differs from argmax one-hot by {diff:e}"));
            }
        }
    }
    Ok(format!("{trials} random batches (B in 2..=8)"))
}

/// Unit value rows give `b/(1+ε)`; disabling the normalization changes the
/// forward pass.
pub fn v_normalization(trials: usize) -> Check {
    let mut r = rng::seeded(40);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (li, lj, dh) = (r.random_range(1..=5), r.random_range(1..=5), r.random_range(1..=4));
        let eps = 10f64.powi(-r.random_range(1..=8));
        let q = random_mat(li, dh, &mut r);
        let k = random_mat(lj, dh, &mut r);
        let mut v = random_mat(lj, dh, &mut r);
        for row in v.data.chunks_mut(dh) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        let mut tape = Tape::new();
        let [qv, kv, vv] = [&q, &k, &v].map(|m| tape.constant(Tensor::new(&[m.rows, m.cols], m.data.clone())));
        let c = cross_doc_attention(&mut tape, qv, kv, vv, &vec![true; lj], dh).map_err(|e| e.to_string())?;
        let normed = v_normalize(&mut tape, c.output, c.weights, vv, eps);
        let expect: Vec<f64> = tape.value(c.output).data().iter().map(|x| x / (1.0 + eps)).collect();
        worst = worst.max(max_diff(tape.value(normed).data(), &expect));
    }
    if worst > 1e-12 {
        return Err(format!("unit-norm values: deviation {worst:e} > 1e-12"));
    }

    let cfg = tiny(8, 2, 2, 12);
    let w = TransformerWeights::init(&cfg, &mut rng::seeded(41));
    let batch: Vec<Vec<u32>> = (0..3).map(|_| random_doc(r.random_range(3..=10), &mut r)).collect();
    let sim = sim_tensor(&random_sim(3, &mut r));
    let logits = |cfg: &ModelConfig| -> Result<Vec<f64>, String> {
        let mut tape = Tape::new();
        let wv = w.bind(&mut tape);
        let s = tape.constant(sim.clone());
        let out = lm_forward(&mut tape, &wv, &batch, s, cfg).map_err(|e| e.to_string())?;
        Ok(out.h_logits.iter().flat_map(|&x| tape.value(x).data().to_vec()).collect())
    };
    let off = ModelConfig {
        v_normalization_enabled: false,
        ..cfg.clone()
    };
    let change = max_diff(&logits(&cfg)?, &logits(&off)?);
    if change < 1e-6 {
        return Err(format!("disabling V-normalization changed logits by only {change:e}"));
    }
    Ok(format!(
        "{trials} unit-norm cases within {worst:.1e}; disabling changes logits by {change:.2e}"
    ))
}

fn forward(w: &TransformerWeights<Tensor>, batch: &[Vec<u32>], sim: &Tensor, cfg: &ModelConfig) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut tape = Tape::new();
    let wv = w.bind(&mut tape);
    let s = tape.constant(sim.clone());
    let out = lm_forward(&mut tape, &wv, batch, s, cfg).expect("forward");
    (
        out.h_logits.iter().map(|&x| tape.value(x).detached()).collect(),
        out.e_logits.iter().map(|&x| tape.value(x).detached()).collect(),
    )
}

/// (a) e-stream isolation, (b) h-stream causality with fixed similarity,
/// (c) cross-document influence.
pub fn masking(trials: usize) -> Check {
    let mut r = rng::seeded(50);
    let cfg = tiny(8, 2, 2, 10);
    let mut min_influence = f64::INFINITY;
    for trial in 0..trials {
        let w = TransformerWeights::init(&cfg, &mut rng::seeded(500 + trial as u64));
        let b = r.random_range(2..=4);
        let batch: Vec<Vec<u32>> = (0..b).map(|_| random_doc(r.random_range(3..=10), &mut r)).collect();
        let sim = sim_tensor(&random_sim(b, &mut r));
        let (h0, e0) = forward(&w, &batch, &sim, &cfg);
        let i = r.random_range(0..b);
        let j = (i + r.random_range(1..b)) % b;

        let mut other = batch.clone();
        other[j] = random_doc(r.random_range(3..=10), &mut r);
        let (h1, e1) = forward(&w, &other, &sim, &cfg);
        if e1[i].data() != e0[i].data() {
            return Err(format!("trial {trial}: e-stream of doc {i} changed when doc {j} was replaced"));
        }
        let influence = max_diff(h1[i].data(), h0[i].data());
        if influence <= 1e-9 {
            return Err(format!("trial {trial}: replacing doc {j} moved doc {i}'s h-logits by only {influence:e}"));
        }
        min_influence = min_influence.min(influence);

        let t = r.random_range(0..batch[i].len() - 1);
        let mut future = batch.clone();
        for tok in &mut future[i][t + 1..] {
            *tok = (*tok + 1 + r.random_range(0..255)) % 256;
        }
        let (h2, _) = forward(&w, &future, &sim, &cfg);
        let v = cfg.vocab_size;
        let prefix = max_diff(&h2[i].data()[..(t + 1) * v], &h0[i].data()[..(t + 1) * v]);
        if prefix != 0.0 {
            return Err(format!("trial {trial}: h-logits of doc {i} up to {t} moved by {prefix:e} after editing later tokens"));
        }
    }
    Ok(format!(
        "{trials} trials each; smallest cross-document effect {min_influence:.2e}"
    ))
}

fn tiny_pair(seed: u64) -> ModelPair {
    let lm_config = tiny(8, 2, 1, 24);
    let ret_config = tiny(8, 2, 1, 24);
    ModelPair {
        lm: TransformerWeights::init(&lm_config, &mut rng::stream(seed, rng::purpose::LM_INIT)),
        lm_config,
        retriever: Encoder::init(ret_config, &mut rng::stream(seed, rng::purpose::RETRIEVER_INIT)).unwrap(),
    }
}

fn text_batch(r: &mut impl rand::Rng, b: usize) -> TrainingBatch {
    TrainingBatch {
        chunks: (0..b)
            .map(|i| Chunk {
                doc_id: format!("d{i}"),
                chunk_index: 0,
                text: (0..r.random_range(4..=9)).map(|_| char::from(r.random_range(b'a'..=b'h'))).collect(),
            })
            .collect(),
    }
}

/// Zero loss on matched distributions, frozen language model, KL = ln 2.
pub fn replug_contract() -> Check {
    let models = tiny_pair(60);
    let mut r = rng::seeded(60);
    let batch = text_batch(&mut r, 4);
    let chunks: Vec<Vec<u32>> = batch.texts().iter().map(|t| t.bytes().map(u32::from).collect()).collect();
    let mut tape = Tape::new();
    let wv = models.retriever.weights.bind(&mut tape);
    let p = retriever_distribution(&mut tape, &wv, &models.retriever.config, &chunks, 0.1, true).map_err(|e| e.to_string())?;
    let copied = tape.value(p.probs).detached();
    let loss = replug_loss(&mut tape, &copied, p.log_probs);
    let zero = tape.value(loss).item();
    if zero.abs() > 1e-9 {
        return Err(format!("loss with copied distribution is {zero:e}"));
    }

    let kl = mean_row_kl(&Tensor::from_rows(&[vec![1.0, 0.0]]), &Tensor::from_rows(&[vec![0.5, 0.5]]));
    if (kl - std::f64::consts::LN_2).abs() > 1e-12 {
        return Err(format!("KL([1,0]||[.5,.5]) = {kl}"));
    }

    let lm_before: Vec<Tensor> = models.lm.flat();
    let ret_before: Vec<Tensor> = models.retriever.weights.flat();
    let config = ReplugConfig {
        tau_r: 0.1,
        tau_lm: 1.0,
        learning_rate: 1e-2,
        warmup_steps: 5,
        total_steps: 50,
        ..ReplugConfig::default()
    };
    let batches: Vec<TrainingBatch> = (0..5).map(|_| text_batch(&mut r, 4)).collect();
    let mut trainer = ReplugTrainer::new(models, config).map_err(|e| e.to_string())?;
    trainer.run(&batches, |_| {}).map_err(|e| e.to_string())?;
    let lm_after = trainer.models.lm.flat();
    if lm_before.iter().zip(&lm_after).any(|(a, b)| a.data() != b.data()) {
        return Err("language model parameters changed during replug training".into());
    }
    let moved = ret_before
        .iter()
        .zip(trainer.models.retriever.weights.flat())
        .map(|(a, b)| max_diff(a.data(), b.data()))
        .fold(0.0, f64::max);
    if moved == 0.0 {
        return Err("retriever did not move in 50 steps".into());
    }
    Ok(format!(
        "matched loss {zero:.1e}; KL {kl:.15}; LM bitwise frozen over 50 steps, retriever moved {moved:.2e}"
    ))
}

fn ids(v: &[usize]) -> Vec<String> {
    v.iter().map(|i| format!("d{i:02}")).collect()
}

fn ranked(qid: &str, docs: &[String]) -> RankedList {
    RankedList {
        query_id: qid.into(),
        entries: docs.iter().enumerate().map(|(i, d)| (d.clone(), (docs.len() - i) as f64)).collect(),
    }
}

/// NDCG and recall against definitions on random cases.
pub fn metric_oracles(cases: usize) -> Check {
    let mut r = rng::seeded(80);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = r.random_range(1..=20);
        let mut pool: Vec<usize> = (0..n).collect();
        pool.shuffle(&mut r);
        let ranking = ids(&pool[..r.random_range(0..=n)]);
        let mut judged = BTreeMap::new();
        for d in ids(&(0..n).collect::<Vec<_>>()) {
            if r.random_bool(0.5) {
                judged.insert(d, r.random_range(0..=3));
            }
        }
        let k = r.random_range(1..=20);
        let list = ranked("q", &ranking);
        let got = ndcg_at_k(&list, &judged, k).map_err(|e| e.to_string())?;
        worst = worst.max((got - ndcg_reference(&ranking, &judged, k)).abs());
        let rec = recall_at_k(&list, &judged, k).map_err(|e| e.to_string())?;
        match (rec, recall_reference(&ranking, &judged, k)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            other => return Err(format!("case {case}: recall definedness differs {other:?}")),
        }
        if worst > 1e-9 {
            return Err(format!("case {case}: metric differs from reference by {worst:e}"));
        }

        let mut perfect: Vec<(&String, &u32)> = judged.iter().filter(|(_, &g)| g > 0).collect();
        if !perfect.is_empty() {
            perfect.sort_by(|a, b| b.1.cmp(a.1));
            let ideal: Vec<String> = perfect.iter().map(|(d, _)| (*d).clone()).collect();
            let l = ranked("q", &ideal);
            let nd = ndcg_at_k(&l, &judged, k).map_err(|e| e.to_string())?;
            let rc = recall_at_k(&l, &judged, ideal.len()).map_err(|e| e.to_string())?;
            if nd != 1.0 || rc != Some(1.0) {
                return Err(format!("case {case}: perfect ranking gives ndcg {nd}, recall {rc:?}"));
            }
        }
    }
    Ok(format!("{cases} random cases, max deviation {worst:.1e}; perfect rankings score exactly 1"))
}

/// RRF score, ordering and depth cut.
pub fn rrf_oracle(pairs: usize) -> Check {
    let one = ids(&[0]);
    let f = rrf_fuse(&ranked("q", &one), &ranked("q", &one), 60, 200).map_err(|e| e.to_string())?;
    if f.entries != [(one[0].clone(), 2.0 / 61.0)] {
        return Err(format!("rank-1 doc fused to {:?}, expected 2/61", f.entries));
    }
    let mut r = rng::seeded(90);
    for pair in 0..pairs {
        let n = r.random_range(1..=40);
        let mut pool: Vec<usize> = (0..n).collect();
        pool.shuffle(&mut r);
        let a = ids(&pool[..r.random_range(0..=n)]);
        pool.shuffle(&mut r);
        let b = ids(&pool[..r.random_range(0..=n)]);
        let k = r.random_range(1..=100);
        let depth = r.random_range(1..=50);
        let got = rrf_fuse(&ranked("q", &a), &ranked("q", &b), k, depth).map_err(|e| e.to_string())?;
        let want = rrf_reference(&[a, b], k, depth);
        if got.entries != want {
            return Err(format!("pair {pair}: fused {:?} != reference {:?}", got.entries, want));
        }
    }
    let wide: Vec<usize> = (0..300).collect();
    let a = ids(&wide[..180]);
    let b = ids(&wide[120..]);
    let f = rrf_fuse(&ranked("q", &a), &ranked("q", &b), 60, 200).map_err(|e| e.to_string())?;
    if f.len() != 200 {
        return Err(format!("300 fused documents cut to {} instead of 200", f.len()));
    }
    Ok(format!("2/61 exact; {pairs} random pairs match; 300 documents cut to depth 200"))
}

/// Mask-based fused forward against the per-pair forward.
pub fn fused_path(configs: usize) -> Check {
    let mut r = rng::seeded(110);
    let mut worst = 0.0f64;
    for c in 0..configs {
        let heads = [1, 2, 4][c % 3];
        let mut cfg = tiny(4 * heads, heads, 1 + c % 2, 10);
        cfg.v_normalization_enabled = c != 3;
        let w = TransformerWeights::init(&cfg, &mut rng::seeded(1100 + c as u64));
        let b = r.random_range(2..=4);
        let batch: Vec<Vec<u32>> = (0..b)
            .map(|_| {
                let mut d = random_doc(r.random_range(2..=10), &mut r);
                if d.len() > 3 && r.random_bool(0.4) {
                    *d.last_mut().unwrap() = PAD;
                }
                d
            })
            .collect();
        let sim = sim_tensor(&random_sim(b, &mut r));
        let (h_ref, e_ref) = forward(&w, &batch, &sim, &cfg);
        let (h, e) = fused_mask_forward(&w, &batch, &sim, &cfg).map_err(|e| e.to_string())?;
        for i in 0..b {
            worst = worst.max(max_diff(h[i].data(), h_ref[i].data()));
            worst = worst.max(max_diff(e[i].data(), e_ref[i].data()));
        }
    }
    if worst > 1e-5 {
        return Err(format!("fused path deviates by {worst:e}"));
    }
    Ok(format!("implemented; {configs} configs within {worst:.1e}"))
}
