//! Phrase-grounding recall and referring-expression accuracy over raw model
//! outputs.
//!
//! Boxes are read from each output with [`extract_links`] in generation
//! order (one flat list across all `<box>` groups), dequantized at the
//! item's image size, and compared to the gold boxes in pixels. A hit needs
//! IoU strictly greater than the threshold. An output with no usable box, or
//! with any malformed box group, is a miss.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, PixelBox};
use crate::locgrid::{dequantize_box, GridSpec, ImageDims};
use crate::markup::extract_links;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no prediction for item {0:?}")]
    MissingPrediction(String),
    #[error("prediction {0:?} has no gold item")]
    UnknownPrediction(String),
    #[error("id {0:?} appears more than once in the {1} file")]
    DuplicateId(String, &'static str),
    #[error("item {0:?} must have exactly one gold box for accuracy")]
    NotSingleGold(String),
    #[error("item {0:?} has no gold boxes")]
    NoGold(String),
    #[error("{file} line {line}: {reason}")]
    Schema {
        file: &'static str,
        line: usize,
        reason: String,
    },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("IoU threshold {0} must lie in (0, 1)")]
    Threshold(f64),
    #[error("read failed: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldItem {
    pub id: String,
    pub phrase: String,
    pub gold_boxes: Vec<PixelBox>,
    pub dims: ImageDims,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub output: String,
}

/// Boxes recovered from one output, in generation order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedOutput {
    pub boxes: Vec<PixelBox>,
    pub malformed: bool,
}

impl DecodedOutput {
    /// No usable box, or a box group that could not be converted.
    pub fn is_failure(&self) -> bool {
        self.malformed || self.boxes.is_empty()
    }
}

pub fn decode_output(output: &str, dims: ImageDims, grid: GridSpec) -> DecodedOutput {
    let (links, malformed) = extract_links(output, grid);
    let boxes = links
        .iter()
        .flat_map(|l| l.boxes.iter())
        .map(|pair| dequantize_box(pair, dims, grid))
        .collect();
    DecodedOutput { boxes, malformed }
}

fn any_hit(pred: &[PixelBox], gold: &[PixelBox], thr: f64) -> bool {
    pred.iter().any(|p| gold.iter().any(|g| iou(p, g) > thr))
}

fn hit_at_k(item: &GoldItem, decoded: &DecodedOutput, k: usize, thr: f64) -> bool {
    if decoded.is_failure() {
        return false;
    }
    let take = k.min(decoded.boxes.len());
    any_hit(&decoded.boxes[..take], &item.gold_boxes, thr)
}

fn check_threshold(thr: f64) -> Result<(), MetricsError> {
    if thr > 0.0 && thr < 1.0 {
        Ok(())
    } else {
        Err(MetricsError::Threshold(thr))
    }
}

fn pair_up<'a>(
    items: &'a [GoldItem],
    preds: &'a [Prediction],
) -> Result<Vec<(&'a GoldItem, &'a Prediction)>, MetricsError> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(MetricsError::DuplicateId(p.id.clone(), "prediction"));
        }
    }
    items
        .iter()
        .map(|item| {
            by_id
                .get(item.id.as_str())
                .map(|p| (item, *p))
                .ok_or_else(|| MetricsError::MissingPrediction(item.id.clone()))
        })
        .collect()
}

fn ratio(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// ANY-BOX recall: an item is a hit when any of its first `k` predicted
/// boxes overlaps any gold box.
pub fn recall_at_k(
    items: &[GoldItem],
    preds: &[Prediction],
    k: usize,
    iou_threshold: f64,
    grid: GridSpec,
) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    check_threshold(iou_threshold)?;
    let pairs = pair_up(items, preds)?;
    let hits = pairs
        .iter()
        .filter(|(item, pred)| {
            let decoded = decode_output(&pred.output, item.dims, grid);
            hit_at_k(item, &decoded, k, iou_threshold)
        })
        .count();
    Ok(ratio(hits, pairs.len()))
}

/// Referring-expression accuracy: only the first generated box counts.
pub fn rec_accuracy(
    items: &[GoldItem],
    preds: &[Prediction],
    iou_threshold: f64,
    grid: GridSpec,
) -> Result<f64, MetricsError> {
    check_threshold(iou_threshold)?;
    if let Some(item) = items.iter().find(|i| i.gold_boxes.len() != 1) {
        return Err(MetricsError::NotSingleGold(item.id.clone()));
    }
    let pairs = pair_up(items, preds)?;
    let hits = pairs
        .iter()
        .filter(|(item, pred)| {
            let decoded = decode_output(&pred.output, item.dims, grid);
            hit_at_k(item, &decoded, 1, iou_threshold)
        })
        .count();
    Ok(ratio(hits, pairs.len()))
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub grid: GridSpec,
    pub iou_threshold: f64,
    pub ks: Vec<usize>,
    /// Dequantize every item at this size instead of the size in the gold
    /// file.
    pub dims_override: Option<ImageDims>,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            ks: DEFAULT_KS.to_vec(),
            dims_override: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub recall_at: BTreeMap<usize, f64>,
    /// Present when every item has exactly one gold box.
    pub accuracy: Option<f64>,
    pub n_items: usize,
    pub n_decode_failures: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>8}", "metric", "value")?;
        for (k, r) in &self.recall_at {
            writeln!(f, "{:<16} {:>8.3}", format!("R@{k}"), r)?;
        }
        if let Some(a) = self.accuracy {
            writeln!(f, "{:<16} {:>8.3}", "accuracy", a)?;
        }
        writeln!(f, "{:<16} {:>8}", "items", self.n_items)?;
        write!(f, "{:<16} {:>8}", "decode_failures", self.n_decode_failures)
    }
}

struct ItemScore {
    /// smallest k at which the item becomes a hit
    first_hit: Option<usize>,
    first_box_hit: bool,
    failed: bool,
}

fn score_item(item: &GoldItem, pred: &Prediction, cfg: &EvalConfig) -> ItemScore {
    let dims = cfg.dims_override.unwrap_or(item.dims);
    let decoded = decode_output(&pred.output, dims, cfg.grid);
    if decoded.is_failure() {
        return ItemScore {
            first_hit: None,
            first_box_hit: false,
            failed: true,
        };
    }
    let first_hit = decoded
        .boxes
        .iter()
        .position(|b| any_hit(std::slice::from_ref(b), &item.gold_boxes, cfg.iou_threshold))
        .map(|p| p + 1);
    ItemScore {
        first_hit,
        first_box_hit: first_hit == Some(1),
        failed: false,
    }
}

/// Scores already-loaded items; see [`score_run`] for the file front end.
pub fn score_items(items: &[GoldItem], preds: &[Prediction], cfg: &EvalConfig) -> Result<MetricsReport, MetricsError> {
    check_threshold(cfg.iou_threshold)?;
    if cfg.ks.contains(&0) {
        return Err(MetricsError::ZeroK);
    }
    let mut seen = std::collections::HashSet::with_capacity(items.len());
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(MetricsError::DuplicateId(item.id.clone(), "gold"));
        }
        if item.gold_boxes.is_empty() {
            return Err(MetricsError::NoGold(item.id.clone()));
        }
    }
    if let Some(p) = preds.iter().find(|p| !seen.contains(p.id.as_str())) {
        return Err(MetricsError::UnknownPrediction(p.id.clone()));
    }
    let pairs = pair_up(items, preds)?;

    let score = |&(item, pred): &(&GoldItem, &Prediction)| score_item(item, pred, cfg);
    let scores: Vec<ItemScore> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| MetricsError::Io(e.to_string()))?;
        pool.install(|| pairs.par_iter().map(score).collect())
    } else {
        pairs.iter().map(score).collect()
    };

    let n = scores.len();
    let recall_at = cfg
        .ks
        .iter()
        .map(|&k| {
            let hits = scores.iter().filter(|s| s.first_hit.is_some_and(|h| h <= k)).count();
            (k, ratio(hits, n))
        })
        .collect();
    let single = items.iter().all(|i| i.gold_boxes.len() == 1);
    let accuracy = single.then(|| ratio(scores.iter().filter(|s| s.first_box_hit).count(), n));
    Ok(MetricsReport {
        recall_at,
        accuracy,
        n_items: n,
        n_decode_failures: scores.iter().filter(|s| s.failed).count(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldLine {
    pub id: String,
    pub phrase: String,
    pub width: u32,
    pub height: u32,
    pub gold_boxes: Vec<PixelBox>,
}

impl GoldLine {
    pub fn to_item(&self) -> Result<GoldItem, String> {
        Ok(GoldItem {
            id: self.id.clone(),
            phrase: self.phrase.clone(),
            gold_boxes: self.gold_boxes.clone(),
            dims: ImageDims::new(self.width, self.height).map_err(|e| e.to_string())?,
        })
    }
}

pub fn read_gold<R: BufRead>(input: R) -> Result<Vec<GoldItem>, MetricsError> {
    read_lines(input, "gold", |line| {
        serde_json::from_str::<GoldLine>(line)
            .map_err(|e| e.to_string())
            .and_then(|g| g.to_item())
    })
}

pub fn read_predictions<R: BufRead>(input: R) -> Result<Vec<Prediction>, MetricsError> {
    read_lines(input, "prediction", |line| {
        serde_json::from_str::<Prediction>(line).map_err(|e| e.to_string())
    })
}

fn read_lines<R: BufRead, T>(
    input: R,
    file: &'static str,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<Vec<T>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| MetricsError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|reason| MetricsError::Schema {
            file,
            line: i + 1,
            reason,
        })?);
    }
    Ok(out)
}

/// Reads `gold.jsonl` and `pred.jsonl` and scores them.
pub fn score_run<G: BufRead, P: BufRead>(gold: G, preds: P, cfg: &EvalConfig) -> Result<MetricsReport, MetricsError> {
    let items = read_gold(gold)?;
    let preds = read_predictions(preds)?;
    score_items(&items, &preds, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::locgrid::{quantize_box, TokenBoxPair};
    use crate::markup::render_box_group;

    fn g() -> GridSpec {
        GridSpec::default()
    }

    fn d224() -> ImageDims {
        ImageDims::new(224, 224).unwrap()
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> PixelBox {
        PixelBox::new(x1, y1, x2, y2).unwrap()
    }

    fn item(id: &str, gold: Vec<PixelBox>) -> GoldItem {
        GoldItem {
            id: id.into(),
            phrase: "thing".into(),
            gold_boxes: gold,
            dims: d224(),
        }
    }

    fn pred(id: &str, output: &str) -> Prediction {
        Prediction {
            id: id.into(),
            output: output.into(),
        }
    }

    fn group(pairs: &[(u32, u32)]) -> String {
        let pairs: Vec<_> = pairs
            .iter()
            .map(|&(a, b)| TokenBoxPair::new(a, b, g()).unwrap())
            .collect();
        render_box_group(&pairs)
    }

    #[test]
    fn single_hit() {
        // tokens (0, 165) dequantize to (3.5, 3.5, 38.5, 38.5); IoU vs (0,0,45,45) is 35^2/45^2
        let out = format!("<p> thing </p>{}", group(&[(0, 165)]));
        let gold = vec![bx(0., 0., 45., 45.)];
        let expected_iou = (35.0f64 * 35.0) / (45.0 * 45.0);
        assert!((expected_iou - 0.6049).abs() < 1e-3);
        let r = recall_at_k(&[item("a", gold)], &[pred("a", &out)], 1, 0.5, g()).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn malformed_output_is_miss() {
        let gold = vec![bx(0., 0., 224., 224.)];
        let r = recall_at_k(
            &[item("a", gold.clone())],
            &[pred("a", "<box><loc_1></box>")],
            1,
            0.5,
            g(),
        )
        .unwrap();
        assert_eq!(r, 0.0);
        let a = rec_accuracy(&[item("a", gold)], &[pred("a", "")], 0.5, g()).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn accuracy_uses_first_box_only() {
        let gold = bx(0., 0., 100., 100.);
        let good = quantize_box(&gold, d224(), g());
        // first box far away, second box matches
        let out = format!(
            "<p> x </p><box><loc_1023><loc_1023><delim><loc_{}><loc_{}></box>",
            good.tl.0, good.br.0
        );
        let items = [item("a", vec![gold])];
        let preds = [pred("a", &out)];
        assert_eq!(rec_accuracy(&items, &preds, 0.5, g()).unwrap(), 0.0);
        assert_eq!(recall_at_k(&items, &preds, 5, 0.5, g()).unwrap(), 1.0);
    }

    #[test]
    fn threshold_is_strict() {
        // pred dequantizes to (3.5,3.5,220.5,220.5), area 217^2; gold of area
        // exactly half makes IoU 0.5, which is not a hit
        let pred_box = bx(3.5, 3.5, 220.5, 220.5);
        let gold = bx(3.5, 3.5, 3.5 + 217.0 / 2.0, 220.5);
        assert!((iou(&pred_box, &gold) - 0.5).abs() < 1e-12);
        let items = [item("a", vec![gold])];
        let preds = [pred("a", &group(&[(0, 1023)]))];
        assert_eq!(rec_accuracy(&items, &preds, 0.5, g()).unwrap(), 0.0);
        assert_eq!(rec_accuracy(&items, &preds, 0.49, g()).unwrap(), 1.0);
    }

    #[test]
    fn fewer_boxes_than_k_uses_all() {
        let gold = bx(0., 0., 224., 224.);
        let items = [item("a", vec![gold])];
        let preds = [pred("a", &group(&[(0, 1023)]))];
        assert_eq!(recall_at_k(&items, &preds, 10, 0.5, g()).unwrap(), 1.0);
    }

    #[test]
    fn missing_prediction_is_error() {
        let items = [item("a", vec![bx(0., 0., 1., 1.)])];
        assert_eq!(
            recall_at_k(&items, &[], 1, 0.5, g()),
            Err(MetricsError::MissingPrediction("a".into()))
        );
        let cfg = EvalConfig::default();
        assert_eq!(
            score_items(&items, &[pred("a", ""), pred("b", "")], &cfg),
            Err(MetricsError::UnknownPrediction("b".into()))
        );
        assert!(matches!(
            rec_accuracy(
                &[item("a", vec![bx(0., 0., 1., 1.), bx(0., 0., 2., 2.)])],
                &[pred("a", "")],
                0.5,
                g()
            ),
            Err(MetricsError::NotSingleGold(_))
        ));
    }

    #[test]
    fn report_over_files() {
        let gold = "{\"id\":\"a\",\"phrase\":\"dog\",\"width\":224,\"height\":224,\"gold_boxes\":[[0,0,224,224]]}\n\
                    {\"id\":\"b\",\"phrase\":\"cat\",\"width\":224,\"height\":224,\"gold_boxes\":[[0,0,112,112]]}\n";
        let preds = format!(
            "{{\"id\":\"b\",\"output\":\"<p> cat </p>{}\"}}\n{{\"id\":\"a\",\"output\":\"nothing\"}}\n",
            group(&[(0, 15 * 32 + 15)])
        );
        let report = score_run(gold.as_bytes(), preds.as_bytes(), &EvalConfig::default()).unwrap();
        assert_eq!(report.n_items, 2);
        assert_eq!(report.n_decode_failures, 1);
        assert_eq!(report.recall_at[&1], 0.5);
        assert_eq!(report.accuracy, Some(0.5));
        assert!(report.to_string().contains("R@10"));

        let err = score_run("{\"id\":1}\n".as_bytes(), "".as_bytes(), &EvalConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            MetricsError::Schema {
                file: "gold",
                line: 1,
                ..
            }
        ));
    }
}
