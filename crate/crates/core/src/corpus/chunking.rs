use super::{Chunk, Document};

/// Splits after `.`, `!` or `?` when the next character is whitespace or the
/// end of input. Abbreviations are not special-cased.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let boundary = chars.peek().is_none_or(|&(_, n)| n.is_whitespace());
            if boundary {
                let end = i + c.len_utf8();
                push_trimmed(&mut out, &text[start..end]);
                start = end;
            }
        }
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Greedy sentence packing under a whitespace-word budget. A sentence longer
/// than the budget is cut at word boundaries into budget-sized pieces, each
/// emitted as its own chunk.
pub fn chunk_document(doc: &Document, max_words: usize) -> Vec<Chunk> {
    assert!(max_words > 0, "max_words must be positive");
    let mut texts: Vec<String> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut current_words = 0;

    for sentence in split_sentences(&doc.text) {
        let n = word_count(&sentence);
        if n > max_words {
            if !current.is_empty() {
                texts.push(current.join(" "));
                current.clear();
                current_words = 0;
            }
            let words: Vec<&str> = sentence.split_whitespace().collect();
            texts.extend(words.chunks(max_words).map(|w| w.join(" ")));
            continue;
        }
        if current_words + n > max_words {
            texts.push(current.join(" "));
            current.clear();
            current_words = 0;
        }
        current.push(sentence);
        current_words += n;
    }
    if !current.is_empty() {
        texts.push(current.join(" "));
    }

    texts
        .into_iter()
        .enumerate()
        .map(|(chunk_index, text)| Chunk {
            doc_id: doc.id.clone(),
            chunk_index,
            text,
        })
        .collect()
}

/// Round-robin by chunk index: every document's first chunk in corpus
/// order, then every second chunk, skipping exhausted documents.
pub fn interleave(docs: &[Vec<Chunk>]) -> Vec<Chunk> {
    let depth = docs.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(docs.iter().map(Vec::len).sum());
    for k in 0..depth {
        for chunks in docs {
            if let Some(c) = chunks.get(k) {
                out.push(c.clone());
            }
        }
    }
    out
}
