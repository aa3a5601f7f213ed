//! Fixtures shared by the benchmarks in `benches/`.

use revela_core::corpus::synthetic::{topic_corpus, TopicCorpusSpec};
use revela_core::corpus::{Tokenizer, PAD};
use revela_core::numkernel::Tensor;
use revela_core::transformer::{ModelConfig, TransformerWeights};

/// Model of the given width with a seeded initialization.
pub fn model(d_model: usize, n_layers: usize, max_seq_len: usize) -> (ModelConfig, TransformerWeights<Tensor>) {
    let cfg = ModelConfig {
        d_model,
        n_heads: 2,
        n_layers,
        d_ff: 2 * d_model,
        max_seq_len,
        init_std: 0.07,
        ..ModelConfig::default()
    };
    let w = TransformerWeights::init(&cfg, &mut revela_core::rng::seeded(0));
    (cfg, w)
}

/// `b` synthetic chunks tokenized and padded (or cut) to `len`.
pub fn token_batch(b: usize, len: usize) -> Vec<Vec<u32>> {
    let docs = topic_corpus(&TopicCorpusSpec {
        n_docs: b.div_ceil(6),
        ..TopicCorpusSpec::default()
    });
    docs.iter()
        .take(b)
        .map(|d| {
            let mut t = Tokenizer.encode(&d.text);
            t.resize(len, PAD);
            t
        })
        .collect()
}

/// Uniform off-diagonal similarity.
pub fn uniform_sim(b: usize) -> Tensor {
    let off = 1.0 / (b - 1) as f64;
    let rows: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| if i == j { 0.0 } else { off }).collect()).collect();
    Tensor::from_rows(&rows)
}
