//! Grounded image-text pair construction.
//!
//! Input is a dependency-parsed caption with its noun chunks ([`ParseDoc`])
//! and the detector boxes found for those chunks. The steps:
//!
//! 1. drop abstract chunks ([`filter_chunks`]),
//! 2. suppress overlapping boxes across all chunks, keep confident ones
//!    ([`select_boxes`]),
//! 3. expand each boxed chunk to its dependency subtree ([`expand_chunk`]),
//! 4. keep only expressions not contained in another ([`retain_maximal`]),
//! 5. hand each expression the boxes of its chunk and render the grounded
//!    string ([`build_record`]).

mod expand;
pub mod io;
mod record;
mod stats;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, PixelBox};
use crate::locgrid::{GridError, ImageDims};
use crate::markup::EncodeError;

pub use expand::{expand_chunk, filter_chunks, retain_maximal};
pub use record::{build_record, select_boxes, BuildConfig, BuildOutcome, DiscardReason};
pub use stats::{compute_stats, DatasetStats};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.65;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.7;

/// Seed stoplist of abstract nouns, one lemma per line.
pub const DEFAULT_STOPLIST: &str = include_str!("../../data/stoplist.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("parse has no tokens")]
    NoTokens,
    #[error("token {token} has head {head} outside 0..{len}")]
    HeadOutOfRange { token: usize, head: usize, len: usize },
    #[error("expected exactly one root token, found {0}")]
    RootCount(usize),
    #[error("token {0} is on a dependency cycle")]
    Cycle(usize),
    #[error("chunk {0} is malformed (needs start <= head < end <= token count)")]
    BadChunk(usize),
    #[error("chunk {0} overlaps the previous chunk")]
    OverlappingChunks(usize),
    #[error("token {0} text cannot be located in the caption")]
    Alignment(usize),
    #[error("detection refers to chunk {index}, but the caption has {count} chunks")]
    UnknownChunk { index: usize, count: usize },
    #[error("threshold {0} must lie in (0, 1]")]
    Threshold(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("cannot render grounded text: {0}")]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseToken {
    pub text: String,
    /// Index of the governing token; the root points at itself.
    pub head: usize,
    pub dep: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounChunk {
    pub start: usize,
    pub end: usize,
    pub head: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseDoc {
    pub image_id: String,
    pub dims: ImageDims,
    pub caption: String,
    pub tokens: Vec<ParseToken>,
    pub chunks: Vec<NounChunk>,
}

impl ParseDoc {
    /// Checks the dependency tree and chunk spans.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(PipelineError::NoTokens);
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.head >= n {
                return Err(PipelineError::HeadOutOfRange {
                    token: i,
                    head: t.head,
                    len: n,
                });
            }
        }
        let roots = self.tokens.iter().enumerate().filter(|(i, t)| t.head == *i).count();
        if roots != 1 {
            return Err(PipelineError::RootCount(roots));
        }
        // every token must reach the root within n steps
        let mut reaches_root = vec![false; n];
        for start in 0..n {
            let mut path = Vec::new();
            let mut cur = start;
            loop {
                if reaches_root[cur] || self.tokens[cur].head == cur {
                    break;
                }
                if path.len() > n {
                    return Err(PipelineError::Cycle(start));
                }
                path.push(cur);
                cur = self.tokens[cur].head;
            }
            for p in path {
                reaches_root[p] = true;
            }
        }
        let mut prev_end = 0;
        for (i, c) in self.chunks.iter().enumerate() {
            if !(c.start <= c.head && c.head < c.end && c.end <= n) {
                return Err(PipelineError::BadChunk(i));
            }
            if i > 0 && c.start < prev_end {
                return Err(PipelineError::OverlappingChunks(i));
            }
            prev_end = c.end;
        }
        Ok(())
    }

    /// Byte ranges of each token in the caption, found left to right.
    /// Only whitespace may sit between consecutive tokens.
    pub fn token_offsets(&self) -> Result<Vec<(usize, usize)>, PipelineError> {
        let mut offsets = Vec::with_capacity(self.tokens.len());
        let mut cursor = 0;
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.text.is_empty() {
                return Err(PipelineError::Alignment(i));
            }
            let rest = &self.caption[cursor..];
            let skip = rest.len() - rest.trim_start().len();
            let start = if rest[skip..].starts_with(&tok.text) {
                cursor + skip
            } else if rest.starts_with(&tok.text) {
                // whitespace tokens
                cursor
            } else {
                return Err(PipelineError::Alignment(i));
            };
            let end = start + tok.text.len();
            offsets.push((start, end));
            cursor = end;
        }
        Ok(offsets)
    }
}

/// A noun chunk grown into a referring expression. `start..end` are token
/// indices and always contain the source chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionSpan {
    pub start: usize,
    pub end: usize,
    pub source_chunk: usize,
    pub text: String,
}

impl ExpressionSpan {
    pub fn contains(&self, other: &ExpressionSpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn same_range(&self, other: &ExpressionSpan) -> bool {
        self.start == other.start && self.end == other.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GritRef {
    pub span: ExpressionSpan,
    pub boxes: Vec<PixelBox>,
}

/// One grounded image-text pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GritRecord {
    pub image_id: String,
    pub dims: ImageDims,
    pub caption: String,
    pub refs: Vec<GritRef>,
    pub grounded_text: String,
}

/// Lowercased head lemmas of chunks to drop.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stoplist(HashSet<String>);

impl Stoplist {
    /// One entry per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty())
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_STOPLIST)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for Stoplist {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(|s| s.into().to_lowercase()).collect())
    }
}
