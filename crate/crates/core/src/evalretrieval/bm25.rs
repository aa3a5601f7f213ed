use std::collections::BTreeMap;

use super::RankedList;
use crate::corpus::Document;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

fn terms(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Okapi BM25 inverted index. Documents are stored in ascending id order, so
/// postings are sorted by doc id.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    pub doc_ids: Vec<String>,
    pub doc_lens: Vec<usize>,
    pub avg_len: f64,
    /// Term to `(document index, term frequency)`.
    pub postings: BTreeMap<String, Vec<(usize, u32)>>,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Index {
    pub fn build(docs: &[Document]) -> Self {
        Self::with_params(docs, BM25_K1, BM25_B)
    }

    pub fn with_params(docs: &[Document], k1: f64, b: f64) -> Self {
        let mut order: Vec<&Document> = docs.iter().collect();
        order.sort_by(|x, y| x.id.cmp(&y.id));
        let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(order.len());
        for (idx, d) in order.iter().enumerate() {
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            let mut len = 0;
            for t in terms(&d.text) {
                *tf.entry(t).or_default() += 1;
                len += 1;
            }
            doc_lens.push(len);
            for (t, n) in tf {
                postings.entry(t).or_default().push((idx, n));
            }
        }
        let avg_len = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64
        };
        Self {
            doc_ids: order.into_iter().map(|d| d.id.clone()).collect(),
            doc_lens,
            avg_len,
            postings,
            k1,
            b,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    /// `ln(1 + (N − df + 0.5)/(df + 0.5))`.
    pub fn idf(&self, df: usize) -> f64 {
        let n = self.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores of every document matching at least one query term. Repeated
    /// query terms contribute once per occurrence.
    pub fn scores(&self, query: &str) -> BTreeMap<usize, f64> {
        let mut acc = BTreeMap::new();
        for t in terms(query) {
            let Some(post) = self.postings.get(&t) else { continue };
            let idf = self.idf(post.len());
            for &(doc, tf) in post {
                let tf = f64::from(tf);
                let norm = self.k1 * (1.0 - self.b + self.b * self.doc_lens[doc] as f64 / self.avg_len);
                *acc.entry(doc).or_insert(0.0) += idf * tf * (self.k1 + 1.0) / (tf + norm);
            }
        }
        acc
    }
}

pub fn bm25_search(query_id: &str, query: &str, index: &Bm25Index, top_k: usize) -> RankedList {
    let scored = index
        .scores(query)
        .into_iter()
        .map(|(d, s)| (index.doc_ids[d].clone(), s))
        .collect();
    RankedList::from_scores(query_id, scored, top_k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            id: id.into(),
            text: text.into(),
        }
    }

    #[test]
    fn single_doc_single_term_formula() {
        let idx = Bm25Index::build(&[doc("d", "apple")]);
        let r = bm25_search("q", "Apple", &idx, 10);
        let idf = (1.0f64 + 0.5 / 1.5).ln();
        let want = idf * 1.0 * 2.2 / (1.0 + 1.2);
        assert_eq!(r.entries.len(), 1);
        assert!((r.entries[0].1 - want).abs() < 1e-15);
    }

    #[test]
    fn absent_term_and_universal_term() {
        let idx = Bm25Index::build(&[doc("a", "x y"), doc("b", "x z")]);
        assert!(bm25_search("q", "nothing", &idx, 10).is_empty());
        assert!(idx.idf(2) > 0.0);
        let r = bm25_search("q", "z", &idx, 10);
        assert_eq!(r.doc_ids().collect::<Vec<_>>(), ["b"]);
    }
}
