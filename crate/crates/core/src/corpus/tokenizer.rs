//! Byte-level tokenizer: one id per UTF-8 byte plus two special ids.

pub const PAD: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Inverse of [`encode`](Self::encode); special ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }
}

/// Right-pads every sequence with [`PAD`] to the longest length.
pub fn pad_batch(seqs: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut p = s.clone();
            p.resize(width, PAD);
            p
        })
        .collect()
}
