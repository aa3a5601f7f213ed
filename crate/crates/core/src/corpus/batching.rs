use rand::seq::SliceRandom;

use super::{Chunk, TrainingBatch};
use crate::error::{Error, Result};
use crate::rng;

/// Groups chunks sequentially into batches of `batch_size`; a trailing
/// incomplete group is dropped.
pub fn build_batches(chunks: &[Chunk], batch_size: usize) -> Vec<TrainingBatch> {
    assert!(batch_size > 0, "batch size must be positive");
    chunks
        .chunks_exact(batch_size)
        .map(|c| TrainingBatch { chunks: c.to_vec() })
        .collect()
}

/// Flattens, shuffles with a seeded generator and regroups at the same batch
/// size. Destroys the locality that sequential grouping provides.
pub fn shuffle_chunks_global(batches: &[TrainingBatch], seed: u64) -> Vec<TrainingBatch> {
    let Some(first) = batches.first() else {
        return Vec::new();
    };
    let size = first.len();
    let mut flat: Vec<Chunk> = batches.iter().flat_map(|b| b.chunks.iter().cloned()).collect();
    flat.shuffle(&mut rng::stream(seed, rng::purpose::SHUFFLE));
    build_batches(&flat, size)
}

/// Concatenates batch streams from several sources and shuffles batch order.
/// Batches themselves stay intact.
pub fn merge_batch_files(sources: Vec<Vec<TrainingBatch>>, seed: u64) -> Result<Vec<TrainingBatch>> {
    let mut all: Vec<TrainingBatch> = sources.into_iter().flatten().collect();
    if let Some(first) = all.first() {
        let size = first.len();
        if let Some(bad) = all.iter().find(|b| b.len() != size) {
            return Err(Error::Data(format!(
                "cannot merge batches of size {} and {}",
                size,
                bad.len()
            )));
        }
    }
    all.shuffle(&mut rng::stream(seed, rng::purpose::MERGE));
    Ok(all)
}
