//! Finite-difference verification of the full training objective.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{revela_loss, ModelPair, PreparedBatch, TrainConfig};
use crate::corpus::{Chunk, TrainingBatch};
use crate::error::Result;
use crate::numkernel::{gradcheck, GradcheckReport, Tensor};
use crate::retriever::{Encoder, Role};
use crate::rng;
use crate::transformer::{ModelConfig, TransformerWeights};

/// Tiny problem for checking gradients of every parameter of both networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Larger than the training default so every path carries gradient well
    /// above finite-difference noise.
    pub init_std: f64,
    pub tau: f64,
    pub delta: f64,
    pub threshold: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            batch_size: 3,
            seq_len: 8,
            init_std: 0.3,
            tau: 0.5,
            delta: 1e-5,
            threshold: 1e-5,
        }
    }
}

/// Models, batch and training config for a gradcheck run.
pub fn gradcheck_setup(cfg: &GradcheckConfig, seed: u64) -> Result<(ModelPair, TrainingBatch, TrainConfig)> {
    let base = ModelConfig {
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        n_layers: cfg.n_layers,
        d_ff: cfg.d_ff,
        init_std: cfg.init_std,
        ..ModelConfig::default()
    };
    let lm_config = ModelConfig {
        max_seq_len: cfg.seq_len,
        ..base.clone()
    };
    let longest_prefix = Role::Passage.prefix().len().max(Role::Query.prefix().len());
    let retriever_config = ModelConfig {
        max_seq_len: longest_prefix + cfg.seq_len + 1,
        ..base
    };
    lm_config.validate()?;
    let lm = TransformerWeights::init(&lm_config, &mut rng::stream(seed, rng::purpose::LM_INIT));
    let retriever = Encoder::init(retriever_config, &mut rng::stream(seed, rng::purpose::RETRIEVER_INIT))?;

    let mut r = rng::stream(seed, rng::purpose::SYNTHETIC);
    let chunks = (0..cfg.batch_size)
        .map(|i| Chunk {
            doc_id: format!("g{i}"),
            chunk_index: 0,
            text: (0..cfg.seq_len).map(|_| char::from(r.random_range(b'a'..=b'z'))).collect(),
        })
        .collect();
    let train = TrainConfig {
        tau: cfg.tau,
        seed,
        ..TrainConfig::default()
    };
    Ok((
        ModelPair {
            lm_config,
            lm,
            retriever,
        },
        TrainingBatch { chunks },
        train,
    ))
}

/// Central-difference check of the full loss over every parameter of both
/// networks, language model first.
pub fn revela_gradcheck(models: &ModelPair, batch: &TrainingBatch, train: &TrainConfig, delta: f64) -> Result<GradcheckReport> {
    let prepared = PreparedBatch::new(batch, models.lm_config.max_seq_len)?;
    let lm_flat = models.lm.flat();
    let n_lm = lm_flat.len();
    let params: Vec<Tensor> = lm_flat.into_iter().chain(models.retriever.weights.flat()).collect();
    let objective = |tape: &mut crate::numkernel::Tape, vars: &[crate::numkernel::Var]| {
        let lm = models.lm.with_flat(&vars[..n_lm]);
        let ret = models.retriever.weights.with_flat(&vars[n_lm..]);
        revela_loss(
            tape,
            &lm,
            &models.lm_config,
            &ret,
            &models.retriever.config,
            &prepared,
            train,
        )
        .map(|o| o.loss)
    };
    // Surface data errors before the unchecked loop below.
    let mut tape = crate::numkernel::Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.constant(p.detached())).collect();
    objective(&mut tape, &vars)?;
    drop(tape);
    Ok(gradcheck(&params, delta, |tape, vars| {
        objective(tape, vars).expect("objective succeeded on the unperturbed parameters")
    }))
}
