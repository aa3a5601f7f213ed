//! Corpus handling: tokenization, sentence-complete chunking, interleaving
//! and batch files.
//!
//! Corpus files are JSONL with one `{"id", "text"}` record per document (an
//! optional `"title"` is prepended as `"{title}. {text}"`). Batch files are
//! JSONL with one `{"chunks": [...]}` record per batch.

mod batching;
mod chunking;
pub mod synthetic;
mod tokenizer;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batching::{build_batches, merge_batch_files, shuffle_chunks_global};
pub use chunking::{chunk_document, interleave, split_sentences, word_count};
pub use tokenizer::{pad_batch, Tokenizer, EOS, PAD, VOCAB_SIZE};

pub const DEFAULT_MAX_WORDS: usize = 120;
pub const DEFAULT_BATCH_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub chunks: Vec<Chunk>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.chunks.iter().map(|c| c.text.as_str()).collect()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentRecord {
    id: String,
    text: String,
    #[serde(default)]
    title: Option<String>,
}

#[derive(Serialize)]
struct DocumentOut<'a> {
    id: &'a str,
    text: &'a str,
}

/// The chunk → interleave → batch pipeline over a whole corpus.
pub fn prepare_batches(docs: &[Document], max_words: usize, batch_size: usize) -> Vec<TrainingBatch> {
    let chunked: Vec<Vec<Chunk>> = docs.iter().map(|d| chunk_document(d, max_words)).collect();
    build_batches(&interleave(&chunked), batch_size)
}

fn read_lines(path: &Path) -> Result<impl Iterator<Item = (usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<(usize, String)> = reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)))
        .collect::<std::io::Result<_>>()?;
    Ok(lines.into_iter().filter(|(_, l)| !l.trim().is_empty()))
}

pub fn parse_corpus(path: &Path) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in read_lines(path)? {
        let rec: DocumentRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", path.display())))?;
        if rec.id.is_empty() {
            return Err(Error::Data(format!("{}:{lineno}: empty document id", path.display())));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Data(format!("{}:{lineno}: duplicate id {}", path.display(), rec.id)));
        }
        let text = match rec.title {
            Some(t) if !t.is_empty() => format!("{t}. {}", rec.text),
            _ => rec.text,
        };
        docs.push(Document { id: rec.id, text });
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut w, &DocumentOut { id: &d.id, text: &d.text })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_batches(path: &Path) -> Result<Vec<TrainingBatch>> {
    let mut out = Vec::new();
    for (lineno, line) in read_lines(path)? {
        let b: TrainingBatch = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", path.display())))?;
        if b.is_empty() {
            return Err(Error::Data(format!("{}:{lineno}: empty batch", path.display())));
        }
        out.push(b);
    }
    Ok(out)
}

pub fn write_batches(path: &Path, batches: &[TrainingBatch]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for b in batches {
        serde_json::to_writer(&mut w, b)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
