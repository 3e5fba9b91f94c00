use super::{ExpressionSpan, NounChunk, ParseDoc, Stoplist};

/// Chunks whose head word is not in the stoplist, with their indices.
pub fn filter_chunks<'a>(doc: &'a ParseDoc, stoplist: &Stoplist) -> Vec<(usize, &'a NounChunk)> {
    doc.chunks
        .iter()
        .enumerate()
        .filter(|(_, c)| !stoplist.contains(&doc.tokens[c.head].text))
        .collect()
}

fn children(doc: &ParseDoc) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); doc.tokens.len()];
    for (i, t) in doc.tokens.iter().enumerate() {
        if t.head != i {
            out[t.head].push(i);
        }
    }
    out
}

fn surface(doc: &ParseDoc, offsets: &[(usize, usize)], start: usize, end: usize) -> String {
    doc.caption[offsets[start].0..offsets[end - 1].1].to_string()
}

/// Grows a chunk into the full dependency subtree of its head.
///
/// The chunk is returned as-is when its head has a `conj` or `cc` child, or
/// when the subtree (together with the chunk) is not contiguous in the
/// sentence. `doc` must be valid.
pub fn expand_chunk(doc: &ParseDoc, chunk_index: usize) -> ExpressionSpan {
    let offsets = doc
        .token_offsets()
        .expect("expand_chunk requires a caption aligned with its tokens");
    expand_with(doc, &children(doc), &offsets, chunk_index)
}

pub(crate) fn expand_with(
    doc: &ParseDoc,
    kids: &[Vec<usize>],
    offsets: &[(usize, usize)],
    chunk_index: usize,
) -> ExpressionSpan {
    let chunk = doc.chunks[chunk_index];
    let unexpanded = || ExpressionSpan {
        start: chunk.start,
        end: chunk.end,
        source_chunk: chunk_index,
        text: surface(doc, offsets, chunk.start, chunk.end),
    };

    let has_conjunct = kids[chunk.head]
        .iter()
        .any(|&c| matches!(doc.tokens[c].dep.as_str(), "conj" | "cc"));
    if has_conjunct {
        return unexpanded();
    }

    let mut member = vec![false; doc.tokens.len()];
    member[chunk.start..chunk.end].iter_mut().for_each(|m| *m = true);
    let mut stack = vec![chunk.head];
    while let Some(t) = stack.pop() {
        member[t] = true;
        stack.extend_from_slice(&kids[t]);
    }
    let lo = member.iter().position(|&m| m).unwrap();
    let hi = member.iter().rposition(|&m| m).unwrap() + 1;
    if member[lo..hi].iter().any(|&m| !m) {
        return unexpanded();
    }
    ExpressionSpan {
        start: lo,
        end: hi,
        source_chunk: chunk_index,
        text: surface(doc, offsets, lo, hi),
    }
}

/// Keeps spans not strictly contained in another span. Of several spans
/// with the same range only the first survives. Order is preserved.
pub fn retain_maximal(spans: &[ExpressionSpan]) -> Vec<ExpressionSpan> {
    spans
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            spans
                .iter()
                .enumerate()
                .all(|(j, o)| if s.same_range(o) { j >= *i } else { !o.contains(s) })
        })
        .map(|(_, s)| s.clone())
        .collect()
}
