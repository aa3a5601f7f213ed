use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::{Qrels, RankedList, Run};
use crate::error::{Error, Result};

/// Graded NDCG@k with gain `2^rel − 1` and discount `log2(rank + 1)`.
/// 0 when the query has no relevant documents.
pub fn ndcg_at_k(ranked: &RankedList, judged: &BTreeMap<String, u32>, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let discount = |i: usize| (i as f64 + 2.0).log2();
    let dcg: f64 = ranked
        .doc_ids()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(judged.get(d).copied().unwrap_or(0)) / discount(i))
        .sum();
    let mut grades: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let ideal: f64 = grades.iter().take(k).enumerate().map(|(i, &g)| gain(g) / discount(i)).sum();
    Ok(if ideal > 0.0 { dcg / ideal } else { 0.0 })
}

/// Fraction of relevant documents found in the top `k`; `None` when the
/// query has no relevant documents.
pub fn recall_at_k(ranked: &RankedList, judged: &BTreeMap<String, u32>, k: usize) -> Result<Option<f64>> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let relevant = judged.values().filter(|&&g| g > 0).count();
    if relevant == 0 {
        return Ok(None);
    }
    let found = ranked
        .doc_ids()
        .take(k)
        .filter(|d| judged.get(*d).is_some_and(|&g| g > 0))
        .count();
    Ok(Some(found as f64 / relevant as f64))
}

/// Area under the ROC curve for scores of positive versus negative pairs:
/// the probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> f64 {
    assert!(!positives.is_empty() && !negatives.is_empty(), "both classes must be present");
    let mut all: Vec<(f64, bool)> = positives.iter().map(|&s| (s, true)).chain(negatives.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U with average ranks over ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ndcg(usize),
    Recall(usize),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown metric {s:?}; expected ndcg@K or recall@K"));
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name.to_ascii_lowercase().as_str() {
            "ndcg" => Ok(Metric::Ndcg(k)),
            "recall" => Ok(Metric::Recall(k)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Metric name to mean over the queries where it is defined.
    pub mean: BTreeMap<String, f64>,
    /// Number of queries contributing to each mean.
    pub queries: BTreeMap<String, usize>,
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Averages each metric over judged queries. A judged query missing from the
/// run counts as an empty ranking.
pub fn evaluate_run(run: &Run, qrels: &Qrels, metrics: &[Metric]) -> Result<EvalReport> {
    if qrels.is_empty() {
        return Err(Error::Data("qrels contain no judgments".into()));
    }
    let mut per_query: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (qid, judged) in &qrels.0 {
        let empty = RankedList {
            query_id: qid.clone(),
            entries: Vec::new(),
        };
        let ranked = run.get(qid).unwrap_or(&empty);
        for m in metrics {
            let v = match *m {
                Metric::Ndcg(k) => Some(ndcg_at_k(ranked, judged, k)?),
                Metric::Recall(k) => recall_at_k(ranked, judged, k)?,
            };
            if let Some(v) = v {
                per_query.entry(qid.clone()).or_default().insert(m.to_string(), v);
                let s = sums.entry(m.to_string()).or_insert((0.0, 0));
                s.0 += v;
                s.1 += 1;
            }
        }
    }
    Ok(EvalReport {
        mean: sums
            .iter()
            .map(|(k, &(s, n))| (k.clone(), if n > 0 { s / n as f64 } else { 0.0 }))
            .collect(),
        queries: sums.iter().map(|(k, &(_, n))| (k.clone(), n)).collect(),
        per_query,
    })
}
