use std::collections::BTreeMap;

use super::expand::{expand_with, filter_chunks, retain_maximal};
use super::{
    ExpressionSpan, GritRecord, GritRef, ParseDoc, PipelineError, Stoplist, DEFAULT_NMS_THRESHOLD,
    DEFAULT_SCORE_THRESHOLD,
};
use crate::geometry::{nms, PixelBox, ScoredBox};
use crate::locgrid::{quantize_box, GridSpec};
use crate::markup::{serialize, GroundLink, GroundedCaption, TextSpan};

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub grid: GridSpec,
    /// Detections must score strictly above this.
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub stoplist: Stoplist,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            stoplist: Stoplist::builtin(),
        }
    }
}

impl BuildConfig {
    pub fn check(&self) -> Result<(), PipelineError> {
        for t in [self.score_threshold, self.nms_threshold] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(PipelineError::Threshold(t));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscardReason {
    /// No detection survived suppression and the score cut.
    NoBoxes,
    /// Boxes survived but no expression could carry them.
    NoRefs,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BuildOutcome {
    Record(GritRecord),
    Discarded(DiscardReason),
}

/// Suppresses overlapping boxes across all chunks, then keeps survivors
/// scoring strictly above `score_threshold`, grouped by chunk. Boxes keep
/// their input order within a group.
pub fn select_boxes(dets: &[ScoredBox], score_threshold: f64, nms_threshold: f64) -> BTreeMap<usize, Vec<PixelBox>> {
    let mut groups: BTreeMap<usize, Vec<PixelBox>> = BTreeMap::new();
    for i in nms(dets, nms_threshold) {
        let d = &dets[i];
        if d.score > score_threshold {
            groups.entry(d.chunk_index).or_default().push(d.bbox);
        }
    }
    groups
}

/// Runs the whole construction for one caption.
pub fn build_record(doc: &ParseDoc, dets: &[ScoredBox], config: &BuildConfig) -> Result<BuildOutcome, PipelineError> {
    config.check()?;
    doc.validate()?;
    if let Some(d) = dets.iter().find(|d| d.chunk_index >= doc.chunks.len()) {
        return Err(PipelineError::UnknownChunk {
            index: d.chunk_index,
            count: doc.chunks.len(),
        });
    }
    let offsets = doc.token_offsets()?;

    let mut kept_chunk = vec![false; doc.chunks.len()];
    for (i, _) in filter_chunks(doc, &config.stoplist) {
        kept_chunk[i] = true;
    }
    // stoplisted chunks are never sent to the detector
    let live: Vec<ScoredBox> = dets.iter().filter(|d| kept_chunk[d.chunk_index]).copied().collect();
    let groups = select_boxes(&live, config.score_threshold, config.nms_threshold);
    if groups.is_empty() {
        return Ok(BuildOutcome::Discarded(DiscardReason::NoBoxes));
    }

    let mut kids = vec![Vec::new(); doc.tokens.len()];
    for (i, t) in doc.tokens.iter().enumerate() {
        if t.head != i {
            kids[t.head].push(i);
        }
    }
    let expressions: Vec<ExpressionSpan> = groups.keys().map(|&c| expand_with(doc, &kids, &offsets, c)).collect();
    let mut retained = retain_maximal(&expressions);
    retained.sort_by_key(|e| (e.start, e.source_chunk));

    // expressions may still cross without nesting; first one wins
    let mut refs: Vec<GritRef> = Vec::with_capacity(retained.len());
    for expr in retained {
        if refs.last().is_some_and(|r| r.span.end > expr.start) {
            continue;
        }
        let boxes = groups.get(&expr.source_chunk).cloned().unwrap_or_default();
        if boxes.is_empty() {
            continue;
        }
        refs.push(GritRef { span: expr, boxes });
    }
    if refs.is_empty() {
        return Ok(BuildOutcome::Discarded(DiscardReason::NoRefs));
    }

    let grounded_text = render_grounded(doc, &offsets, &refs, config.grid)?;
    Ok(BuildOutcome::Record(GritRecord {
        image_id: doc.image_id.clone(),
        dims: doc.dims,
        caption: doc.caption.clone(),
        refs,
        grounded_text,
    }))
}

fn render_grounded(
    doc: &ParseDoc,
    offsets: &[(usize, usize)],
    refs: &[GritRef],
    grid: GridSpec,
) -> Result<String, PipelineError> {
    let char_of = |byte: usize| doc.caption[..byte].chars().count();
    let links = refs
        .iter()
        .map(|r| {
            let start = char_of(offsets[r.span.start].0);
            GroundLink {
                span: TextSpan {
                    start,
                    end: start + r.span.text.chars().count(),
                    text: r.span.text.clone(),
                },
                boxes: r.boxes.iter().map(|b| quantize_box(b, doc.dims, grid)).collect(),
            }
        })
        .collect();
    let caption = GroundedCaption::new(doc.caption.clone(), links).with_grounding_marker();
    Ok(serialize(&caption, grid)?)
}
