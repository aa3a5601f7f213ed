use super::RankedList;
use crate::corpus::{Document, Tokenizer};
use crate::error::Result;
use crate::retriever::{Encoder, Role};

/// Unit-norm embeddings (`z / (‖z‖ + 1e-12)`) of every document under `role`.
pub fn embed_corpus(encoder: &Encoder, docs: &[Document], role: Role) -> Result<Vec<Vec<f64>>> {
    docs.iter()
        .map(|d| {
            let mut z = encoder.embed_text(&Tokenizer.encode(&d.text), role)?;
            let n = z.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
            z.iter_mut().for_each(|x| *x /= n);
            Ok(z)
        })
        .collect()
}

/// Dot products of one unit query vector against unit passage vectors.
pub fn cosine_scores(query: &[f64], passages: &[Vec<f64>]) -> Vec<f64> {
    passages.iter().map(|p| p.iter().zip(query).map(|(a, b)| a * b).sum()).collect()
}

/// Cosine top-`k` for each query, queries under the query role and corpus
/// under the passage role.
pub fn dense_search(encoder: &Encoder, queries: &[Document], corpus: &[Document], top_k: usize) -> Result<Vec<RankedList>> {
    let passages = embed_corpus(encoder, corpus, Role::Passage)?;
    let qvecs = embed_corpus(encoder, queries, Role::Query)?;
    Ok(queries
        .iter()
        .zip(&qvecs)
        .map(|(q, v)| {
            let scored = corpus
                .iter()
                .zip(cosine_scores(v, &passages))
                .map(|(d, s)| (d.id.clone(), s))
                .collect();
            RankedList::from_scores(q.id.clone(), scored, top_k)
        })
        .collect())
}
