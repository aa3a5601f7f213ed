//! Synthetic topic corpus for learning tests.
//!
//! Each topic document owns a byte distribution: uniform over an alphanumeric
//! alphabet, with a handful of topic bytes boosted. A document is emitted as
//! a run of consecutive passages, one chunk each, so sequential batching
//! places same-document chunks together the way neighbouring passages of one
//! article land together in a real corpus.

use rand::seq::index::sample;
use rand::Rng;

use super::Document;
use crate::rng;

const ALPHABET: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Debug, Clone)]
pub struct TopicCorpusSpec {
    pub n_docs: usize,
    pub chunks_per_doc: usize,
    pub topic_bytes: usize,
    /// Probability that a character is drawn from the topic bytes.
    pub topic_prob: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for TopicCorpusSpec {
    fn default() -> Self {
        Self {
            n_docs: 64,
            chunks_per_doc: 6,
            topic_bytes: 5,
            topic_prob: 0.9,
            min_words: 5,
            max_words: 9,
            seed: 0,
        }
    }
}

/// Passage id for chunk `k` of topic document `d`.
pub fn passage_id(d: usize, k: usize) -> String {
    format!("doc{d:03}-p{k}")
}

/// Topic document a passage id belongs to.
pub fn topic_of(passage_id: &str) -> &str {
    passage_id.split_once("-p").map_or(passage_id, |(t, _)| t)
}

pub fn topic_corpus(spec: &TopicCorpusSpec) -> Vec<Document> {
    assert!(spec.topic_bytes <= ALPHABET.len());
    assert!(spec.min_words >= 1 && spec.min_words <= spec.max_words);
    let mut rng = rng::stream(spec.seed, rng::purpose::SYNTHETIC);
    let mut docs = Vec::with_capacity(spec.n_docs * spec.chunks_per_doc);
    for d in 0..spec.n_docs {
        let topic: Vec<u8> = sample(&mut rng, ALPHABET.len(), spec.topic_bytes)
            .into_iter()
            .map(|i| ALPHABET[i])
            .collect();
        for k in 0..spec.chunks_per_doc {
            let n_words = rng.random_range(spec.min_words..=spec.max_words);
            let words: Vec<String> = (0..n_words)
                .map(|_| {
                    let len = rng.random_range(3..=6);
                    (0..len)
                        .map(|_| {
                            if rng.random_bool(spec.topic_prob) {
                                topic[rng.random_range(0..topic.len())] as char
                            } else {
                                ALPHABET[rng.random_range(0..ALPHABET.len())] as char
                            }
                        })
                        .collect()
                })
                .collect();
            docs.push(Document {
                id: passage_id(d, k),
                text: format!("{}.", words.join(" ")),
            });
        }
    }
    docs
}
