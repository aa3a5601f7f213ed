//! Search, ranking metrics and run fusion.
//!
//! Run files use the six-column TREC layout `qid Q0 docid rank score tag`.
//! Qrels are tab-separated `query_id doc_id relevance`. Queries are JSONL
//! `{"id", "text"}` records, the same shape as corpus files.

mod bm25;
mod dense;
mod fusion;
mod metrics;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub use bm25::{bm25_search, Bm25Index, BM25_B, BM25_K1};
pub use dense::{cosine_scores, dense_search, embed_corpus};
pub use fusion::{rrf_fuse, rrf_fuse_runs, RRF_DEPTH, RRF_K};
pub use metrics::{evaluate_run, ndcg_at_k, recall_at_k, roc_auc, EvalReport, Metric};

/// One query's results: descending score, ascending `doc_id` among ties.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    /// Sorts `scored` into rank order and keeps the first `top_k`.
    pub fn from_scores(query_id: impl Into<String>, mut scored: Vec<(String, f64)>, top_k: usize) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(top_k);
        Self {
            query_id: query_id.into(),
            entries: scored,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(d, _)| d.as_str())
    }
}

/// A run: ranked lists keyed by query id.
pub type Run = BTreeMap<String, RankedList>;

/// Relevance grades keyed by query id, then doc id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels(pub BTreeMap<String, BTreeMap<String, u32>>);

impl Qrels {
    pub fn get(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.0.get(query_id)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) {
        self.0.entry(query_id.to_string()).or_default().insert(doc_id.to_string(), grade);
    }

    /// Tab-separated `query_id doc_id relevance`. A first line whose third
    /// field is not an integer is taken as a header and skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut q = Qrels::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            if f.len() != 3 {
                return Err(Error::Data(format!("qrels line {}: expected 3 tab-separated fields", i + 1)));
            }
            let grade = match f[2].parse::<i64>() {
                Ok(g) if g >= 0 => g as u32,
                Ok(g) => return Err(Error::Data(format!("qrels line {}: negative relevance {g}", i + 1))),
                Err(_) if i == 0 => continue,
                Err(_) => return Err(Error::Data(format!("qrels line {}: bad relevance {:?}", i + 1, f[2]))),
            };
            q.insert(f[0], f[1], grade);
        }
        Ok(q)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

pub fn write_run(w: &mut impl Write, run: &Run, tag: &str) -> Result<()> {
    for list in run.values() {
        for (rank, (doc, score)) in list.entries.iter().enumerate() {
            writeln!(w, "{} Q0 {} {} {} {}", list.query_id, doc, rank + 1, score, tag)?;
        }
    }
    Ok(())
}

pub fn save_run(path: &Path, run: &Run, tag: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_run(&mut w, run, tag)?;
    w.flush()?;
    Ok(())
}

/// Reads a run, ordering each query's entries by the rank column.
pub fn parse_run(r: impl BufRead) -> Result<Run> {
    let mut ranked: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| Error::Data(format!("run line {}: {what}", i + 1));
        if f.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let rank: usize = f[3].parse().map_err(|_| bad("bad rank"))?;
        let score: f64 = f[4].parse().map_err(|_| bad("bad score"))?;
        ranked.entry(f[0].to_string()).or_default().push((rank, f[2].to_string(), score));
    }
    Ok(ranked
        .into_iter()
        .map(|(qid, mut rows)| {
            rows.sort_by_key(|r| r.0);
            let entries = rows.into_iter().map(|(_, d, s)| (d, s)).collect();
            (qid.clone(), RankedList { query_id: qid, entries })
        })
        .collect())
}

pub fn load_run(path: &Path) -> Result<Run> {
    parse_run(BufReader::new(File::open(path)?))
}
