//! Perplexity-distillation baseline: the retriever's in-batch distribution is
//! aligned by KL divergence to one derived from a frozen language model's
//! conditional likelihoods.

use serde::{Deserialize, Serialize};

use crate::corpus::{Tokenizer, TrainingBatch};
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::retriever::{batch_embeddings, normalize_rows, SimilarityMatrix};
use crate::training::{lr_at, AdamConfig, AdamState, Checkpoint, CheckpointMeta, ModelPair, OptimizerStates, StepMetrics, TrainConfig};
use crate::transformer::{causal_logits, ModelConfig, TransformerWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplugConfig {
    pub tau_r: f64,
    pub tau_lm: f64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Byte placed between the conditioning chunk and the scored chunk.
    pub separator: u8,
    /// Row embeddings from the first half of each chunk, as in the main trainer.
    pub half_chunk_mode: bool,
    pub grad_clip: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ReplugConfig {
    fn default() -> Self {
        Self {
            tau_r: 0.001,
            tau_lm: 0.001,
            learning_rate: 5e-4,
            warmup_steps: 100,
            total_steps: 4500,
            separator: b'\n',
            half_chunk_mode: true,
            grad_clip: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl ReplugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_r > 0.0 && self.tau_lm > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        self.schedule().validate()
    }

    /// Learning-rate schedule in the main trainer's terms.
    pub fn schedule(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            grad_clip: self.grad_clip,
            adam: self.adam,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// `[D_j, sep, D_i]` cut to `max_len` by dropping tokens from the front of
/// `D_j` first, then from the end of `D_i`. Returns the sequence and the
/// index where `D_i` starts.
pub fn conditional_input(d_i: &[u32], d_j: &[u32], sep: u8, max_len: usize) -> (Vec<u32>, usize) {
    let d_i = &d_i[..d_i.len().min(max_len.saturating_sub(1))];
    let room = max_len - 1 - d_i.len();
    let ctx = &d_j[d_j.len().saturating_sub(room)..];
    let mut seq = ctx.to_vec();
    seq.push(u32::from(sep));
    let start = seq.len();
    seq.extend_from_slice(d_i);
    (seq, start)
}

/// `−log g_Φ(D_i | D_j)`, averaged over the tokens of `D_i`.
pub fn lm_conditional_nll(
    tape: &mut Tape,
    lm: &TransformerWeights<Var>,
    cfg: &ModelConfig,
    d_i: &[u32],
    d_j: &[u32],
    sep: u8,
) -> Result<Var> {
    if d_i.is_empty() {
        return Err(Error::EmptySequence);
    }
    if cfg.max_seq_len < 2 {
        return Err(Error::Config("max_seq_len must be at least 2 for conditional scoring".into()));
    }
    let (seq, start) = conditional_input(d_i, d_j, sep, cfg.max_seq_len);
    let logits = causal_logits(tape, lm, &seq, cfg)?;
    let targets: Vec<Option<usize>> = (0..seq.len())
        .map(|p| (p + 1 >= start && p + 1 < seq.len()).then(|| seq[p + 1] as usize))
        .collect();
    Ok(tape.cross_entropy(logits, &targets))
}

/// `ℓ_ij` for every ordered pair of a batch, self-pairs included.
pub fn conditional_nll_matrix(lm: &TransformerWeights<Tensor>, cfg: &ModelConfig, chunks: &[Vec<u32>], sep: u8) -> Result<Tensor> {
    let b = chunks.len();
    let mut out = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            let mut tape = Tape::new();
            let w = lm.map(|_, t| tape.constant(t.detached()));
            let nll = lm_conditional_nll(&mut tape, &w, cfg, &chunks[i], &chunks[j], sep)?;
            out.data_mut()[i * b + j] = tape.value(nll).item();
        }
    }
    Ok(out)
}

/// Row softmax of `−ℓ/τ_lm` over all `k`, self included.
pub fn lm_distribution(nll: &Tensor, tau_lm: f64) -> Tensor {
    let (r, c) = (nll.rows(), nll.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let scores: Vec<f64> = nll.row(i).iter().map(|l| -l / tau_lm).collect();
        crate::numkernel::kernels::softmax_slice(&scores, None, &mut out.data_mut()[i * c..(i + 1) * c]);
    }
    out
}

/// Tape handles for the retriever side.
#[derive(Debug, Clone, Copy)]
pub struct RetrieverDistribution {
    pub log_probs: Var,
    pub probs: Var,
}

/// `P_Θ`: row softmax of `z̃_i·z̃_k/τ_r` over all `k` with unit-norm
/// embeddings.
pub fn retriever_distribution(
    tape: &mut Tape,
    w: &TransformerWeights<Var>,
    cfg: &ModelConfig,
    chunks: &[Vec<u32>],
    tau_r: f64,
    half_chunk: bool,
) -> Result<RetrieverDistribution> {
    if chunks.len() < 2 {
        return Err(Error::BatchTooSmall(chunks.len()));
    }
    let (rows, cols) = batch_embeddings(tape, w, cfg, chunks, half_chunk)?;
    let zr = normalize_rows(tape, rows);
    let zc = normalize_rows(tape, cols);
    let zc_t = tape.transpose(zc);
    let s = tape.matmul(zr, zc_t);
    let s = tape.scale(s, 1.0 / tau_r);
    Ok(RetrieverDistribution {
        log_probs: tape.log_softmax(s),
        probs: tape.softmax(s),
    })
}

/// Both distributions for a batch. `P_Φ` is a constant; `P_Θ` lives on
/// `tape`.
#[allow(clippy::too_many_arguments)]
pub fn replug_distributions(
    tape: &mut Tape,
    retriever: &TransformerWeights<Var>,
    retriever_cfg: &ModelConfig,
    lm: &TransformerWeights<Tensor>,
    lm_cfg: &ModelConfig,
    chunks: &[Vec<u32>],
    cfg: &ReplugConfig,
) -> Result<(RetrieverDistribution, Tensor)> {
    let p_theta = retriever_distribution(tape, retriever, retriever_cfg, chunks, cfg.tau_r, cfg.half_chunk_mode)?;
    let nll = conditional_nll_matrix(lm, lm_cfg, chunks, cfg.separator)?;
    Ok((p_theta, lm_distribution(&nll, cfg.tau_lm)))
}

/// `Σ p log p` with `0 log 0 = 0`.
fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum()
}

/// Mean over rows of `KL(P_Φ(·|i) ‖ P_Θ(·|i))`, given `log P_Θ` on the tape.
pub fn replug_loss(tape: &mut Tape, p_phi: &Tensor, log_p_theta: Var) -> Var {
    let b = p_phi.rows() as f64;
    let target = tape.constant(p_phi.detached());
    let cross = tape.mul(target, log_p_theta);
    let cross = tape.sum(cross);
    let loss = tape.scale(cross, -1.0 / b);
    tape.add_scalar(loss, neg_entropy(p_phi.data()) / b)
}

/// Value-only mean row KL, for reporting and tests.
pub fn mean_row_kl(p: &Tensor, q: &Tensor) -> f64 {
    let b = p.rows();
    let total: f64 = (0..b)
        .map(|i| {
            p.row(i)
                .iter()
                .zip(q.row(i))
                .filter(|(&a, _)| a > 0.0)
                .map(|(&a, &c)| a * (a.ln() - c.ln()))
                .sum::<f64>()
        })
        .sum();
    total / b as f64
}

/// Trains the retriever against a frozen language model.
#[derive(Debug, Clone)]
pub struct ReplugTrainer {
    pub config: ReplugConfig,
    pub models: ModelPair,
    pub opt_retriever: AdamState,
    pub step: u64,
}

impl ReplugTrainer {
    pub fn new(models: ModelPair, config: ReplugConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            opt_retriever: AdamState::new(&models.retriever.weights),
            models,
            config,
            step: 0,
        })
    }

    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<StepMetrics> {
        let chunks: Vec<Vec<u32>> = batch.chunks.iter().map(|c| Tokenizer.encode(&c.text)).collect();
        if let Some(i) = chunks.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("chunk {i} of batch is empty")));
        }
        self.models.retriever.weights.zero_grad();
        let mut tape = Tape::new();
        let ret = self.models.retriever.weights.bind(&mut tape);
        let (p_theta, p_phi) = replug_distributions(
            &mut tape,
            &ret,
            &self.models.retriever.config,
            &self.models.lm,
            &self.models.lm_config,
            &chunks,
            &self.config,
        )?;
        let loss = replug_loss(&mut tape, &p_phi, p_theta.log_probs);
        let loss_value = tape.value(loss).item();
        let probs = tape.value(p_theta.probs).detached();
        let grads = tape.backward(loss);
        self.models.retriever.weights.accumulate(&ret, &grads);
        drop(tape);

        let g_theta = self.models.retriever.weights.grad_sq_norm().sqrt();
        let scale = if g_theta > self.config.grad_clip { self.config.grad_clip / g_theta } else { 1.0 };
        self.step += 1;
        let lr = lr_at(self.step, &self.config.schedule());
        self.opt_retriever
            .update(&mut self.models.retriever.weights, &self.config.adam, lr, scale);
        let entropy = SimilarityMatrix {
            raw: probs.clone(),
            weights: probs,
            tau: self.config.tau_r,
        }
        .mean_row_entropy();
        Ok(StepMetrics {
            step: self.step,
            loss: loss_value,
            lr,
            grad_norm_theta: g_theta,
            grad_norm_phi: 0.0,
            sim_entropy: entropy,
        })
    }

    pub fn run(&mut self, batches: &[TrainingBatch], mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        if batches.is_empty() {
            return Err(Error::Data("no training batches".into()));
        }
        let mut log = Vec::new();
        while self.step < self.config.total_steps {
            let m = self.train_step(&batches[(self.step as usize) % batches.len()])?;
            on_step(&m);
            log.push(m);
        }
        crate::training::round_to_storage(&mut self.models.retriever.weights);
        Ok(log)
    }

    pub fn checkpoint(&self, config_snapshot: serde_json::Value) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            kind: "replug".into(),
            step: self.step,
            seed: self.config.seed,
            rng: crate::rng::RNG_NAME.into(),
            lm: self.models.lm_config.clone(),
            retriever: self.models.retriever.config.clone(),
            config: config_snapshot,
        };
        self.models.to_checkpoint(
            &meta,
            &OptimizerStates {
                lm: None,
                retriever: Some(self.opt_retriever.clone()),
            },
        )
    }
}
