//! Joint optimization of the retriever and the language model under the
//! batch-conditioned next-token objective.

mod checkpoint;
mod optim;
mod verify;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{pad_batch, Tokenizer, TrainingBatch};
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::retriever::{similarity_matrix, SimilarityMatrix, SimilarityVars};
use crate::transformer::{lm_forward, next_token_targets, ModelConfig, TransformerWeights};

pub use checkpoint::{round_to_storage, Checkpoint, CheckpointMeta, ModelPair, OptimizerStates, MAGIC, VERSION};
pub use optim::{AdamConfig, AdamState};
pub use verify::{gradcheck_setup, revela_gradcheck, GradcheckConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Similarity softmax temperature.
    pub tau: f64,
    /// Row side of the similarity uses only the first half of each chunk.
    pub half_chunk_mode: bool,
    /// Adds next-token loss on the e-stream.
    pub aux_e_stream_loss: bool,
    /// Stop-gradient on the similarity weights (retriever gets no gradient).
    pub detach_similarity: bool,
    pub grad_clip: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            warmup_steps: 100,
            total_steps: 1000,
            tau: 1e-4,
            half_chunk_mode: true,
            aux_e_stream_loss: false,
            detach_similarity: false,
            grad_clip: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps must not exceed total_steps");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `learning_rate` over `warmup_steps`, then linear
/// decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let lr = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return if cfg.total_steps == cfg.warmup_steps && step == cfg.total_steps { lr } else { 0.0 };
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    lr * (cfg.total_steps - step) as f64 / span
}

/// Tokenized views of a batch for both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    /// Right-padded, truncated to the language model's `max_seq_len`.
    pub lm_tokens: Vec<Vec<u32>>,
    /// Raw chunk bytes; the encoder adds its own prefix and `<eos>`.
    pub retriever_tokens: Vec<Vec<u32>>,
}

impl PreparedBatch {
    pub fn new(batch: &TrainingBatch, lm_max_len: usize) -> Result<Self> {
        let tok = Tokenizer;
        let raw: Vec<Vec<u32>> = batch.chunks.iter().map(|c| tok.encode(&c.text)).collect();
        if let Some(i) = raw.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("chunk {i} of batch is empty")));
        }
        let lm: Vec<Vec<u32>> = raw.iter().map(|r| r[..r.len().min(lm_max_len)].to_vec()).collect();
        Ok(Self {
            lm_tokens: pad_batch(&lm),
            retriever_tokens: raw,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub loss: Var,
    pub sim: SimilarityVars,
}

/// Mean next-token negative log-likelihood over every non-pad target of
/// every document, from the h-stream (plus the e-stream with
/// `aux_e_stream_loss`).
#[allow(clippy::too_many_arguments)]
pub fn revela_loss(
    tape: &mut Tape,
    lm: &TransformerWeights<Var>,
    lm_cfg: &ModelConfig,
    retriever: &TransformerWeights<Var>,
    retriever_cfg: &ModelConfig,
    batch: &PreparedBatch,
    cfg: &TrainConfig,
) -> Result<LossOutput> {
    let b = batch.lm_tokens.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let sim = similarity_matrix(
        tape,
        retriever,
        retriever_cfg,
        &batch.retriever_tokens,
        cfg.tau,
        cfg.half_chunk_mode,
    )?;
    let weights = if cfg.detach_similarity { tape.detach(sim.weights) } else { sim.weights };
    let out = lm_forward(tape, lm, &batch.lm_tokens, weights, lm_cfg)?;
    let targets: Vec<Option<usize>> = batch.lm_tokens.iter().flat_map(|t| next_token_targets(t)).collect();
    if targets.iter().all(Option::is_none) {
        return Err(Error::Data("batch has no next-token targets".into()));
    }
    let h = tape.concat_rows(&out.h_logits);
    let mut loss = tape.cross_entropy(h, &targets);
    if cfg.aux_e_stream_loss {
        let e = tape.concat_rows(&out.e_logits);
        let e_loss = tape.cross_entropy(e, &targets);
        loss = tape.add(loss, e_loss);
    }
    Ok(LossOutput { loss, sim })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
    pub sim_entropy: f64,
}

pub fn write_metrics_line(w: &mut impl Write, m: &StepMetrics) -> Result<()> {
    serde_json::to_writer(&mut *w, m)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Owns both networks and their optimizer state for a Revela run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub models: ModelPair,
    pub opt_lm: AdamState,
    pub opt_retriever: AdamState,
    pub step: u64,
}

impl Trainer {
    pub fn new(models: ModelPair, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        models.lm_config.validate()?;
        Ok(Self {
            opt_lm: AdamState::new(&models.lm),
            opt_retriever: AdamState::new(&models.retriever.weights),
            models,
            config,
            step: 0,
        })
    }

    /// Fresh parameters for both networks from `config.seed`.
    pub fn init(lm_config: ModelConfig, retriever_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        lm_config.validate()?;
        let lm = TransformerWeights::init(&lm_config, &mut crate::rng::stream(config.seed, crate::rng::purpose::LM_INIT));
        let retriever = crate::retriever::Encoder::init(
            retriever_config,
            &mut crate::rng::stream(config.seed, crate::rng::purpose::RETRIEVER_INIT),
        )?;
        Self::new(
            ModelPair {
                lm_config,
                lm,
                retriever,
            },
            config,
        )
    }

    /// Loss value and similarity for a batch, without updating anything.
    pub fn evaluate(&self, batch: &TrainingBatch) -> Result<(f64, SimilarityMatrix)> {
        let prepared = PreparedBatch::new(batch, self.models.lm_config.max_seq_len)?;
        let mut tape = Tape::new();
        let lm = self.models.lm.bind(&mut tape);
        let ret = self.models.retriever.weights.bind(&mut tape);
        let out = revela_loss(
            &mut tape,
            &lm,
            &self.models.lm_config,
            &ret,
            &self.models.retriever.config,
            &prepared,
            &self.config,
        )?;
        Ok((
            tape.value(out.loss).item(),
            SimilarityMatrix::from_tape(&tape, out.sim, self.config.tau),
        ))
    }

    /// Zero grads, forward, backward, clip the global norm, update both
    /// networks.
    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<StepMetrics> {
        let prepared = PreparedBatch::new(batch, self.models.lm_config.max_seq_len)?;
        self.models.lm.zero_grad();
        self.models.retriever.weights.zero_grad();

        let mut tape = Tape::new();
        let lm = self.models.lm.bind(&mut tape);
        let ret = self.models.retriever.weights.bind(&mut tape);
        let out = revela_loss(
            &mut tape,
            &lm,
            &self.models.lm_config,
            &ret,
            &self.models.retriever.config,
            &prepared,
            &self.config,
        )?;
        let loss = tape.value(out.loss).item();
        let sim = SimilarityMatrix::from_tape(&tape, out.sim, self.config.tau);
        let grads = tape.backward(out.loss);
        self.models.lm.accumulate(&lm, &grads);
        self.models.retriever.weights.accumulate(&ret, &grads);
        drop(tape);

        let g_phi = self.models.lm.grad_sq_norm().sqrt();
        let g_theta = self.models.retriever.weights.grad_sq_norm().sqrt();
        let global = (g_phi * g_phi + g_theta * g_theta).sqrt();
        let scale = if global > self.config.grad_clip { self.config.grad_clip / global } else { 1.0 };

        self.step += 1;
        let lr = lr_at(self.step, &self.config);
        self.opt_lm.update(&mut self.models.lm, &self.config.adam, lr, scale);
        self.opt_retriever
            .update(&mut self.models.retriever.weights, &self.config.adam, lr, scale);

        Ok(StepMetrics {
            step: self.step,
            loss,
            lr,
            grad_norm_theta: g_theta,
            grad_norm_phi: g_phi,
            sim_entropy: sim.mean_row_entropy(),
        })
    }

    /// Runs `total_steps - step` updates, cycling through `batches` in file
    /// order. Parameters are rounded to checkpoint precision at the end.
    pub fn run(&mut self, batches: &[TrainingBatch], mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        if batches.is_empty() {
            return Err(Error::Data("no training batches".into()));
        }
        let mut log = Vec::new();
        while self.step < self.config.total_steps {
            let batch = &batches[(self.step as usize) % batches.len()];
            let m = self.train_step(batch)?;
            on_step(&m);
            log.push(m);
        }
        self.models.round_to_storage();
        Ok(log)
    }

    pub fn checkpoint(&self, config_snapshot: serde_json::Value) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            kind: "revela".into(),
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
                lm: Some(self.opt_lm.clone()),
                retriever: Some(self.opt_retriever.clone()),
            },
        )
    }
}

/// Similarity weights as a constant tensor for tape-free paths.
pub fn similarity_values(trainer: &Trainer, batch: &TrainingBatch) -> Result<Tensor> {
    Ok(trainer.evaluate(batch)?.1.weights)
}
