use std::collections::{BTreeMap, HashSet};

use super::RankedList;
use crate::error::{Error, Result};

pub const RRF_K: usize = 60;
pub const RRF_DEPTH: usize = 200;

/// Reciprocal rank fusion of any number of runs for one query:
/// `score(d) = Σ 1/(k + rank)` over the runs containing `d`.
pub fn rrf_fuse_runs(runs: &[&RankedList], k: usize, depth: usize) -> Result<RankedList> {
    let Some(first) = runs.first() else {
        return Err(Error::Data("nothing to fuse".into()));
    };
    let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
    for run in runs {
        if run.query_id != first.query_id {
            return Err(Error::Data(format!(
                "cannot fuse runs for different queries {} and {}",
                first.query_id, run.query_id
            )));
        }
        let mut seen = HashSet::new();
        for (rank, doc) in run.doc_ids().enumerate() {
            if !seen.insert(doc) {
                return Err(Error::Data(format!("duplicate document {doc} in run for query {}", run.query_id)));
            }
            *scores.entry(doc).or_insert(0.0) += 1.0 / (k + rank + 1) as f64;
        }
    }
    let scored = scores.into_iter().map(|(d, s)| (d.to_string(), s)).collect();
    Ok(RankedList::from_scores(first.query_id.clone(), scored, depth))
}

pub fn rrf_fuse(r1: &RankedList, r2: &RankedList, k: usize, depth: usize) -> Result<RankedList> {
    rrf_fuse_runs(&[r1, r2], k, depth)
}
