//! JSON Lines wire formats and the streaming corpus build.
//!
//! `parses.jsonl` and `detections.jsonl` are read in lockstep, one record
//! per line, and must list the same images in the same order. Good records
//! go to `grit.jsonl`; anything that fails schema or consistency checks goes
//! to a rejects file with its line number and reason. Fields not named by
//! the schemas are carried through to the output record.

use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::record::{build_record, BuildConfig, BuildOutcome};
use super::stats::DatasetStats;
use super::{ExpressionSpan, GritRecord, GritRef, NounChunk, ParseDoc, ParseToken, PipelineError};
use crate::geometry::{PixelBox, ScoredBox};
use crate::locgrid::ImageDims;

/// Pairs read per batch; bounds memory independently of input length.
const BATCH: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseLine {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub caption: String,
    pub tokens: Vec<ParseToken>,
    pub chunks: Vec<NounChunk>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ParseLine {
    pub fn to_doc(&self) -> Result<ParseDoc, PipelineError> {
        let doc = ParseDoc {
            image_id: self.image_id.clone(),
            dims: ImageDims::new(self.width, self.height)?,
            caption: self.caption.clone(),
            tokens: self.tokens.clone(),
            chunks: self.chunks.clone(),
        };
        doc.validate()?;
        Ok(doc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    pub chunk_index: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    pub image_id: String,
    pub detections: Vec<DetectionEntry>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl DetectionLine {
    pub fn to_scored(&self) -> Result<Vec<ScoredBox>, PipelineError> {
        self.detections
            .iter()
            .map(|d| Ok(ScoredBox::new(PixelBox::try_from(d.bbox)?, d.score, d.chunk_index)?))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefLine {
    pub start_tok: usize,
    pub end_tok: usize,
    pub text: String,
    pub boxes: Vec<PixelBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GritLine {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub caption: String,
    pub refs: Vec<RefLine>,
    pub grounded_text: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl GritLine {
    pub fn from_record(rec: &GritRecord, extra: Map<String, Value>) -> Self {
        Self {
            image_id: rec.image_id.clone(),
            width: rec.dims.width,
            height: rec.dims.height,
            caption: rec.caption.clone(),
            refs: rec
                .refs
                .iter()
                .map(|r| RefLine {
                    start_tok: r.span.start,
                    end_tok: r.span.end,
                    text: r.span.text.clone(),
                    boxes: r.boxes.clone(),
                })
                .collect(),
            grounded_text: rec.grounded_text.clone(),
            extra,
        }
    }

    /// The wire format does not carry source chunks; refs are numbered in
    /// order instead.
    pub fn to_record(&self) -> Result<GritRecord, String> {
        let dims = ImageDims::new(self.width, self.height).map_err(|e| e.to_string())?;
        let mut refs = Vec::with_capacity(self.refs.len());
        for (i, r) in self.refs.iter().enumerate() {
            if r.boxes.is_empty() {
                return Err(format!("ref {i} has no boxes"));
            }
            if r.start_tok >= r.end_tok {
                return Err(format!("ref {i} has an empty token range"));
            }
            refs.push(GritRef {
                span: ExpressionSpan {
                    start: r.start_tok,
                    end: r.end_tok,
                    source_chunk: i,
                    text: r.text.clone(),
                },
                boxes: r.boxes.clone(),
            });
        }
        Ok(GritRecord {
            image_id: self.image_id.clone(),
            dims,
            caption: self.caption.clone(),
            refs,
            grounded_text: self.grounded_text.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub source: String,
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub reason: String,
}

impl Reject {
    fn new(source: &str, line: usize, image_id: Option<&str>, reason: impl Into<String>) -> Self {
        Self {
            source: source.to_string(),
            line,
            image_id: image_id.map(str::to_string),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BuildSummary {
    pub pairs: u64,
    pub written: u64,
    pub discarded: u64,
    pub rejected: u64,
    pub stats: DatasetStats,
}

enum Outcome {
    Written { json: String, stats: DatasetStats },
    Discarded,
    Rejected(Reject),
}

/// One input pair; `None` when that file ran out first.
type Pair = (Option<(usize, String)>, Option<(usize, String)>);

fn process_pair(pair: &Pair, config: &BuildConfig) -> Outcome {
    let (p, d) = match pair {
        (Some(p), Some(d)) => (p, d),
        (Some((n, _)), None) => {
            return Outcome::Rejected(Reject::new("parses", *n, None, "no matching line in detections"))
        }
        (None, Some((n, _))) => {
            return Outcome::Rejected(Reject::new("detections", *n, None, "no matching line in parses"))
        }
        (None, None) => unreachable!("empty pair"),
    };
    let parse: ParseLine = match serde_json::from_str(&p.1) {
        Ok(v) => v,
        Err(e) => return Outcome::Rejected(Reject::new("parses", p.0, None, format!("schema: {e}"))),
    };
    let id = Some(parse.image_id.as_str());
    let dets: DetectionLine = match serde_json::from_str(&d.1) {
        Ok(v) => v,
        Err(e) => return Outcome::Rejected(Reject::new("detections", d.0, id, format!("schema: {e}"))),
    };
    if dets.image_id != parse.image_id {
        return Outcome::Rejected(Reject::new(
            "detections",
            d.0,
            id,
            format!("image_id {:?} does not match parses line {}", dets.image_id, p.0),
        ));
    }
    let doc = match parse.to_doc() {
        Ok(doc) => doc,
        Err(e) => return Outcome::Rejected(Reject::new("parses", p.0, id, e.to_string())),
    };
    let scored = match dets.to_scored() {
        Ok(s) => s,
        Err(e) => return Outcome::Rejected(Reject::new("detections", d.0, id, e.to_string())),
    };
    match build_record(&doc, &scored, config) {
        Ok(BuildOutcome::Record(rec)) => {
            let mut extra = parse.extra;
            for (k, v) in dets.extra {
                extra.entry(k).or_insert(v);
            }
            let line = GritLine::from_record(&rec, extra);
            let mut stats = DatasetStats::default();
            stats.add_record(&rec);
            Outcome::Written {
                json: serde_json::to_string(&line).expect("grit line serializes"),
                stats,
            }
        }
        Ok(BuildOutcome::Discarded(_)) => Outcome::Discarded,
        Err(e @ PipelineError::UnknownChunk { .. }) => {
            Outcome::Rejected(Reject::new("detections", d.0, id, e.to_string()))
        }
        Err(e) => Outcome::Rejected(Reject::new("parses", p.0, id, e.to_string())),
    }
}

/// Next non-blank line with its 1-based number.
fn next_line<R: BufRead>(lines: &mut std::iter::Enumerate<io::Lines<R>>) -> io::Result<Option<(usize, String)>> {
    for (i, line) in lines.by_ref() {
        let line = line?;
        if !line.trim().is_empty() {
            return Ok(Some((i + 1, line)));
        }
    }
    Ok(None)
}

/// Streams `parses` and `detections` into `out`, writing problems to
/// `rejects`. Output order always equals input order, whatever `workers` is.
pub fn build_corpus<P, D, O, J>(
    parses: P,
    detections: D,
    mut out: O,
    mut rejects: J,
    config: &BuildConfig,
    workers: usize,
) -> io::Result<BuildSummary>
where
    P: BufRead,
    D: BufRead,
    O: Write,
    J: Write,
{
    config
        .check()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(io::Error::other)?;

    let mut p_lines = parses.lines().enumerate();
    let mut d_lines = detections.lines().enumerate();
    let mut summary = BuildSummary::default();
    let mut batch: Vec<Pair> = Vec::with_capacity(BATCH);
    loop {
        batch.clear();
        while batch.len() < BATCH {
            let p = next_line(&mut p_lines)?;
            let d = next_line(&mut d_lines)?;
            if p.is_none() && d.is_none() {
                break;
            }
            batch.push((p, d));
        }
        if batch.is_empty() {
            break;
        }
        let outcomes: Vec<Outcome> = if workers > 1 {
            pool.install(|| batch.par_iter().map(|pair| process_pair(pair, config)).collect())
        } else {
            batch.iter().map(|pair| process_pair(pair, config)).collect()
        };
        for outcome in outcomes {
            summary.pairs += 1;
            match outcome {
                Outcome::Written { json, stats } => {
                    out.write_all(json.as_bytes())?;
                    out.write_all(b"\n")?;
                    summary.written += 1;
                    summary.stats.merge(&stats);
                }
                Outcome::Discarded => summary.discarded += 1,
                Outcome::Rejected(r) => {
                    serde_json::to_writer(&mut rejects, &r)?;
                    rejects.write_all(b"\n")?;
                    summary.rejected += 1;
                }
            }
        }
        if batch.len() < BATCH {
            break;
        }
    }
    out.flush()?;
    rejects.flush()?;
    Ok(summary)
}

/// Corpus statistics over a `grit.jsonl` stream. Malformed lines are
/// returned as rejects rather than counted.
pub fn stats_from_jsonl<R: BufRead>(input: R) -> io::Result<(DatasetStats, Vec<Reject>)> {
    let mut stats = DatasetStats::default();
    let mut rejects = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<GritLine>(&line)
            .map_err(|e| format!("schema: {e}"))
            .and_then(|g| g.to_record());
        match parsed {
            Ok(rec) => stats.add_record(&rec),
            Err(reason) => rejects.push(Reject::new("grit", i + 1, None, reason)),
        }
    }
    Ok((stats, rejects))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markup::parse;

    const DOG_PARSE: &str = r#"{"image_id":"flowers","width":224,"height":224,"caption":"a dog in a field of flowers","tokens":[{"text":"a","head":1,"dep":"det"},{"text":"dog","head":1,"dep":"ROOT"},{"text":"in","head":1,"dep":"prep"},{"text":"a","head":4,"dep":"det"},{"text":"field","head":2,"dep":"pobj"},{"text":"of","head":4,"dep":"prep"},{"text":"flowers","head":5,"dep":"pobj"}],"chunks":[{"start":0,"end":2,"head":1},{"start":3,"end":5,"head":4},{"start":6,"end":7,"head":6}],"url":"http://example.com/1.jpg"}"#;
    const DOG_DETS: &str = r#"{"image_id":"flowers","detections":[{"chunk_index":0,"box":[20,60,120,200],"score":0.9},{"chunk_index":1,"box":[0,120,224,224],"score":0.8}],"detector":"mock"}"#;

    fn run(parses: &str, dets: &str, workers: usize) -> (String, String, BuildSummary) {
        let mut out = Vec::new();
        let mut rej = Vec::new();
        let s = build_corpus(
            parses.as_bytes(),
            dets.as_bytes(),
            &mut out,
            &mut rej,
            &BuildConfig::default(),
            workers,
        )
        .unwrap();
        (String::from_utf8(out).unwrap(), String::from_utf8(rej).unwrap(), s)
    }

    #[test]
    fn builds_dog_caption_and_passes_extras_through() {
        let (out, rej, s) = run(DOG_PARSE, DOG_DETS, 1);
        assert!(rej.is_empty(), "{rej}");
        assert_eq!((s.pairs, s.written, s.rejected), (1, 1, 0));
        let line: GritLine = serde_json::from_str(out.trim()).unwrap();
        assert_eq!(line.refs.len(), 1);
        assert_eq!(line.refs[0].text, "a dog in a field of flowers");
        assert_eq!((line.refs[0].start_tok, line.refs[0].end_tok), (0, 7));
        assert_eq!(line.refs[0].boxes, vec![PixelBox::new(20., 60., 120., 200.).unwrap()]);
        assert_eq!(line.extra["url"], "http://example.com/1.jpg");
        assert_eq!(line.extra["detector"], "mock");
        parse(&line.grounded_text, Default::default()).unwrap();
    }

    #[test]
    fn rejects_carry_line_numbers() {
        let parses = format!("{DOG_PARSE}\n{{\"image_id\": 3}}\n{DOG_PARSE}\n");
        let other = DOG_DETS.replace("\"flowers\"", "\"other\"");
        let dets = format!("{DOG_DETS}\n{DOG_DETS}\n{other}\n{DOG_DETS}\n");
        let (out, rej, s) = run(&parses, &dets, 1);
        assert_eq!(out.lines().count(), 1);
        assert_eq!(s.rejected, 3);
        let rejects: Vec<Reject> = rej.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!((rejects[0].source.as_str(), rejects[0].line), ("parses", 2));
        assert_eq!((rejects[1].source.as_str(), rejects[1].line), ("detections", 3));
        assert_eq!((rejects[2].source.as_str(), rejects[2].line), ("detections", 4));
    }

    #[test]
    fn bad_boxes_and_chunks_are_rejected() {
        let neg = DOG_DETS.replace("[20,60,120,200]", "[-5,60,120,200]");
        let (_, rej, s) = run(DOG_PARSE, &neg, 1);
        assert_eq!(s.rejected, 1);
        assert!(rej.contains("non-negative"));

        let bad_chunk = DOG_DETS.replace("\"chunk_index\":1", "\"chunk_index\":9");
        let (_, rej, _) = run(DOG_PARSE, &bad_chunk, 1);
        assert!(rej.contains("chunk 9"));
    }

    #[test]
    fn workers_do_not_change_output() {
        let mut parses = String::new();
        let mut dets = String::new();
        for i in 0..300 {
            parses.push_str(&DOG_PARSE.replace("flowers", &format!("img{i}")));
            parses.push('\n');
            let score = if i % 3 == 0 { "0.5" } else { "0.9" };
            dets.push_str(&DOG_DETS.replace("flowers", &format!("img{i}")).replace("0.9", score));
            dets.push('\n');
        }
        let single = run(&parses, &dets, 1);
        let multi = run(&parses, &dets, 4);
        assert_eq!(single.0, multi.0);
        assert_eq!(single.2, multi.2);
        assert_eq!(single.2.discarded, 0);
    }

    #[test]
    fn stats_from_lines() {
        let (out, _, _) = run(DOG_PARSE, DOG_DETS, 1);
        let bad = "{\"image_id\":\"x\"}\n";
        let (stats, rejects) = stats_from_jsonl(format!("{out}{bad}").as_bytes()).unwrap();
        assert_eq!(stats.to_string(), "images=1 objects=1 text_spans=1 avg_len=7.0");
        assert_eq!(rejects.len(), 1);
        assert_eq!(rejects[0].line, 2);
    }
}
