//! Retriever encoder and the in-batch similarity matrix.
//!
//! The encoder is a small causal transformer of its own. Text is wrapped as
//! `prefix ++ text ++ <eos>` and the final-normed hidden state at `<eos>` is
//! the embedding.

use serde::{Deserialize, Serialize};

use crate::corpus::{Tokenizer, EOS};
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::transformer::{causal_hidden, ModelConfig, TransformerWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Passage,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Query => "Query: ",
            Role::Passage => "Passage: ",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Role::Query),
            "passage" => Ok(Role::Passage),
            other => Err(Error::Config(format!("unknown role {other:?}"))),
        }
    }
}

/// Encoder parameters and their configuration. Independent of the language
/// model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: ModelConfig,
    pub weights: TransformerWeights<Tensor>,
}

impl Encoder {
    pub fn init(config: ModelConfig, rng: &mut crate::rng::Rng) -> Result<Self> {
        config.validate()?;
        let weights = TransformerWeights::init(&config, rng);
        Ok(Self { config, weights })
    }

    pub fn dim(&self) -> usize {
        self.config.d_model
    }

    /// Embedding values for one text, without recording gradients.
    pub fn embed_text(&self, text: &[u32], role: Role) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let w = self.weights.bind(&mut tape);
        let z = encode(&mut tape, &w, &self.config, text, role)?;
        Ok(tape.value(z).data().to_vec())
    }
}

/// `prefix ++ text ++ <eos>`, cutting the tail of `text` when the whole
/// would exceed `max_seq_len`.
pub fn encoder_input(text: &[u32], role: Role, max_seq_len: usize) -> Vec<u32> {
    let prefix = Tokenizer.encode(role.prefix());
    let room = max_seq_len.saturating_sub(prefix.len() + 1);
    let mut seq = prefix;
    seq.extend_from_slice(&text[..text.len().min(room)]);
    seq.push(EOS);
    seq
}

/// Embedding (`1×d`) of `text` under `role`.
pub fn encode(tape: &mut Tape, w: &TransformerWeights<Var>, cfg: &ModelConfig, text: &[u32], role: Role) -> Result<Var> {
    if text.is_empty() {
        return Err(Error::EmptySequence);
    }
    let seq = encoder_input(text, role, cfg.max_seq_len);
    let hidden = causal_hidden(tape, w, &seq, cfg)?;
    let last = seq.len() - 1;
    Ok(tape.slice_rows(hidden, last..last + 1))
}

/// Tape handles for a batch similarity computation.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityVars {
    /// Cosine similarities `S`, `B×B`.
    pub raw: Var,
    /// Row-softmax of `S/τ` over off-diagonal entries; diagonal exactly 0.
    pub weights: Var,
}

/// Row-normalizes embeddings (`‖z‖ + 1e-12`).
pub fn normalize_rows(tape: &mut Tape, z: Var) -> Var {
    let norms = tape.l2_norm_rows(z);
    let denom = tape.add_scalar(norms, 1e-12);
    tape.div_col(z, denom)
}

/// Cosine matrix between row embeddings and temperature softmax over each
/// row with the diagonal excluded.
pub fn similarity_from_embeddings(tape: &mut Tape, rows: Var, cols: Var, tau: f64) -> Result<SimilarityVars> {
    let b = tape.shape(rows)[0];
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if tape.shape(cols)[0] != b {
        return Err(Error::LengthMismatch {
            expected: b,
            got: tape.shape(cols)[0],
        });
    }
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let zr = normalize_rows(tape, rows);
    let zc = normalize_rows(tape, cols);
    let zc_t = tape.transpose(zc);
    let raw = tape.matmul(zr, zc_t);
    let scaled = tape.scale(raw, 1.0 / tau);
    let mask: Vec<bool> = (0..b * b).map(|k| k / b != k % b).collect();
    let weights = tape.masked_softmax(scaled, &mask);
    Ok(SimilarityVars { raw, weights })
}

/// Embeddings of a batch: row side under the query role (first half of each
/// chunk in half-chunk mode), column side under the passage role.
pub fn batch_embeddings(
    tape: &mut Tape,
    w: &TransformerWeights<Var>,
    cfg: &ModelConfig,
    chunks: &[Vec<u32>],
    half_chunk: bool,
) -> Result<(Var, Var)> {
    let mut rows = Vec::with_capacity(chunks.len());
    let mut cols = Vec::with_capacity(chunks.len());
    for c in chunks {
        let q = if half_chunk { &c[..(c.len() / 2).max(1).min(c.len())] } else { &c[..] };
        rows.push(encode(tape, w, cfg, q, Role::Query)?);
        cols.push(encode(tape, w, cfg, c, Role::Passage)?);
    }
    Ok((tape.concat_rows(&rows), tape.concat_rows(&cols)))
}

/// Full similarity computation for a batch of tokenized chunks.
pub fn similarity_matrix(
    tape: &mut Tape,
    w: &TransformerWeights<Var>,
    cfg: &ModelConfig,
    chunks: &[Vec<u32>],
    tau: f64,
    half_chunk: bool,
) -> Result<SimilarityVars> {
    if chunks.len() < 2 {
        return Err(Error::BatchTooSmall(chunks.len()));
    }
    let (rows, cols) = batch_embeddings(tape, w, cfg, chunks, half_chunk)?;
    similarity_from_embeddings(tape, rows, cols, tau)
}

/// Owned snapshot of a similarity computation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub raw: Tensor,
    pub weights: Tensor,
    pub tau: f64,
}

impl SimilarityMatrix {
    pub fn from_tape(tape: &Tape, vars: SimilarityVars, tau: f64) -> Self {
        Self {
            raw: tape.value(vars.raw).detached(),
            weights: tape.value(vars.weights).detached(),
            tau,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.weights.rows()
    }

    /// Mean Shannon entropy (nats) of the weight rows.
    pub fn mean_row_entropy(&self) -> f64 {
        let b = self.batch_size();
        let total: f64 = (0..b)
            .map(|i| {
                self.weights
                    .row(i)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum::<f64>()
            })
            .sum();
        total / b as f64
    }
}
