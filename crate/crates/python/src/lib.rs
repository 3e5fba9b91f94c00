use std::fs::File;
use std::io::{BufReader, BufWriter};

use grit_core::geometry::{self, PixelBox, ScoredBox};
use grit_core::locgrid::{self, GridSpec, ImageDims, TokenBoxPair};
use grit_core::markup::{self, GroundedCaption};
use grit_core::metrics::{self, EvalConfig};
use grit_core::pipeline::io::{build_corpus as core_build_corpus, DetectionLine, GritLine, ParseLine};
use grit_core::pipeline::{build_record as core_build_record, BuildConfig, BuildOutcome, Stoplist};
use grit_core::prompts::{self, PromptTemplate};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(
    grit_toolkit,
    DecodeError,
    PyException,
    "Markup that does not follow the grammar."
);

type Box4 = (f64, f64, f64, f64);
type Pairs = Vec<(u32, u32)>;
type Extracted = (Vec<(Option<String>, Pairs)>, bool);

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn grid(bins: u32) -> PyResult<GridSpec> {
    GridSpec::new(bins).map_err(value_err)
}

fn pixel_box(b: Box4) -> PyResult<PixelBox> {
    PixelBox::new(b.0, b.1, b.2, b.3).map_err(value_err)
}

fn tuple_of(b: &PixelBox) -> Box4 {
    (b.x1, b.y1, b.x2, b.y2)
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Pixel box to a `(top_left, bottom_right)` pair of token indices.
#[pyfunction]
#[pyo3(signature = (bbox, width, height, bins = locgrid::DEFAULT_BINS))]
fn quantize(bbox: Box4, width: u32, height: u32, bins: u32) -> PyResult<(u32, u32)> {
    let dims = ImageDims::new(width, height).map_err(value_err)?;
    let pair = locgrid::quantize_box(&pixel_box(bbox)?, dims, grid(bins)?);
    Ok((pair.tl.0, pair.br.0))
}

/// Token pair to the pixel box spanning the two cell centers.
#[pyfunction]
#[pyo3(signature = (tl, br, width, height, bins = locgrid::DEFAULT_BINS))]
fn dequantize(tl: u32, br: u32, width: u32, height: u32, bins: u32) -> PyResult<Box4> {
    let g = grid(bins)?;
    let dims = ImageDims::new(width, height).map_err(value_err)?;
    let pair = TokenBoxPair::new(tl, br, g).map_err(value_err)?;
    Ok(tuple_of(&locgrid::dequantize_box(&pair, dims, g)))
}

#[pyfunction]
fn iou(a: Box4, b: Box4) -> PyResult<f64> {
    Ok(geometry::iou(&pixel_box(a)?, &pixel_box(b)?))
}

/// Indices of the boxes kept by greedy suppression, ascending.
#[pyfunction]
#[pyo3(signature = (boxes, scores, threshold = 0.7))]
fn nms(boxes: Vec<Box4>, scores: Vec<f64>, threshold: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let scored = boxes
        .into_iter()
        .zip(scores)
        .map(|(b, s)| ScoredBox::new(pixel_box(b)?, s, 0).map_err(value_err))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(geometry::nms(&scored, threshold))
}

/// A caption with its grounded spans.
#[pyclass(name = "GroundedCaption", module = "grit_toolkit")]
#[derive(Clone)]
struct PyGroundedCaption {
    inner: GroundedCaption,
}

#[pymethods]
impl PyGroundedCaption {
    /// `links` holds `(start, end, [(tl, br), ...])` with character offsets.
    #[new]
    #[pyo3(signature = (caption, links = Vec::new(), grounding = false, image_slot = false))]
    fn new(caption: String, links: Vec<(usize, usize, Pairs)>, grounding: bool, image_slot: bool) -> PyResult<Self> {
        let g = GridSpec::default();
        let chars: Vec<char> = caption.chars().collect();
        let mut out = Vec::with_capacity(links.len());
        for (start, end, boxes) in links {
            if start >= end || end > chars.len() {
                return Err(PyValueError::new_err(format!(
                    "span {start}..{end} outside the caption"
                )));
            }
            let boxes = boxes
                .into_iter()
                .map(|(tl, br)| TokenBoxPair::new(tl, br, g).map_err(value_err))
                .collect::<PyResult<Vec<_>>>()?;
            out.push(markup::GroundLink {
                span: markup::TextSpan {
                    start,
                    end,
                    text: chars[start..end].iter().collect(),
                },
                boxes,
            });
        }
        let mut inner = GroundedCaption::new(caption, out);
        if grounding {
            inner = inner.with_grounding_marker();
        }
        if image_slot {
            inner = inner.with_image_slot();
        }
        Ok(Self { inner })
    }

    #[getter]
    fn caption(&self) -> &str {
        &self.inner.caption
    }

    /// `(phrase, start, end, [(tl, br), ...])` per link.
    #[getter]
    fn links(&self) -> Vec<(String, usize, usize, Pairs)> {
        self.inner
            .links
            .iter()
            .map(|l| {
                let boxes = l.boxes.iter().map(|p| (p.tl.0, p.br.0)).collect();
                (l.span.text.clone(), l.span.start, l.span.end, boxes)
            })
            .collect()
    }

    #[getter]
    fn has_grounding_marker(&self) -> bool {
        self.inner.has_grounding_marker
    }

    #[getter]
    fn has_image_slot(&self) -> bool {
        self.inner.has_image_slot()
    }

    #[pyo3(signature = (bins = locgrid::DEFAULT_BINS))]
    fn serialize(&self, bins: u32) -> PyResult<String> {
        markup::serialize(&self.inner, grid(bins)?).map_err(value_err)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("caption serializes")
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(text).map_err(value_err)?,
        })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "GroundedCaption({:?}, {} links)",
            self.inner.caption,
            self.inner.links.len()
        )
    }
}

/// Strict parse; raises `DecodeError` on malformed markup.
#[pyfunction]
#[pyo3(signature = (text, bins = locgrid::DEFAULT_BINS))]
fn parse(text: &str, bins: u32) -> PyResult<PyGroundedCaption> {
    markup::parse(text, grid(bins)?)
        .map(|inner| PyGroundedCaption { inner })
        .map_err(|e| DecodeError::new_err((e.to_string(), e.position)))
}

/// Lenient box extraction from model output: `([(phrase, [(tl, br)])], failed)`.
#[pyfunction]
#[pyo3(signature = (text, bins = locgrid::DEFAULT_BINS))]
fn extract_links(text: &str, bins: u32) -> PyResult<Extracted> {
    let (links, failed) = markup::extract_links(text, grid(bins)?);
    let links = links
        .into_iter()
        .map(|l| (l.phrase, l.boxes.iter().map(|p| (p.tl.0, p.br.0)).collect()))
        .collect();
    Ok((links, failed))
}

fn build_config(
    score_threshold: f64,
    nms_threshold: f64,
    stoplist: Option<Vec<String>>,
    bins: u32,
) -> PyResult<BuildConfig> {
    let config = BuildConfig {
        grid: grid(bins)?,
        score_threshold,
        nms_threshold,
        stoplist: stoplist.map_or_else(Stoplist::builtin, |words| words.into_iter().collect()),
    };
    config.check().map_err(value_err)?;
    Ok(config)
}

/// One `parses.jsonl` line plus its `detections.jsonl` line to a
/// `grit.jsonl` record, or `None` when nothing survives.
#[pyfunction]
#[pyo3(signature = (parse_line, detection_line, score_threshold = 0.65, nms_threshold = 0.7, stoplist = None, bins = locgrid::DEFAULT_BINS))]
fn build_record<'py>(
    py: Python<'py>,
    parse_line: &str,
    detection_line: &str,
    score_threshold: f64,
    nms_threshold: f64,
    stoplist: Option<Vec<String>>,
    bins: u32,
) -> PyResult<Option<Bound<'py, PyAny>>> {
    let config = build_config(score_threshold, nms_threshold, stoplist, bins)?;
    let parse: ParseLine = serde_json::from_str(parse_line).map_err(value_err)?;
    let dets: DetectionLine = serde_json::from_str(detection_line).map_err(value_err)?;
    let doc = parse.to_doc().map_err(value_err)?;
    let scored = dets.to_scored().map_err(value_err)?;
    match core_build_record(&doc, &scored, &config).map_err(value_err)? {
        BuildOutcome::Record(rec) => {
            let line = GritLine::from_record(&rec, parse.extra);
            Ok(Some(json_to_py(py, &serde_json::to_string(&line).map_err(value_err)?)?))
        }
        BuildOutcome::Discarded(_) => Ok(None),
    }
}

/// Streams two JSONL files into `output` and `rejects`; returns the summary.
#[pyfunction]
#[pyo3(signature = (parses, detections, output, rejects, workers = 1, score_threshold = 0.65, nms_threshold = 0.7, stoplist = None, bins = locgrid::DEFAULT_BINS))]
#[allow(clippy::too_many_arguments)]
fn build_corpus<'py>(
    py: Python<'py>,
    parses: &str,
    detections: &str,
    output: &str,
    rejects: &str,
    workers: usize,
    score_threshold: f64,
    nms_threshold: f64,
    stoplist: Option<Vec<String>>,
    bins: u32,
) -> PyResult<Bound<'py, PyAny>> {
    let config = build_config(score_threshold, nms_threshold, stoplist, bins)?;
    let open = |p: &str| {
        File::open(p)
            .map(BufReader::new)
            .map_err(|e| PyIOError::new_err(format!("{p}: {e}")))
    };
    let create = |p: &str| {
        File::create(p)
            .map(BufWriter::new)
            .map_err(|e| PyIOError::new_err(format!("{p}: {e}")))
    };
    let (p, d, o, r) = (open(parses)?, open(detections)?, create(output)?, create(rejects)?);
    let summary = py
        .allow_threads(|| core_build_corpus(p, d, o, r, &config, workers))
        .map_err(|e| PyIOError::new_err(e.to_string()))?;
    json_to_py(py, &serde_json::to_string(&summary).map_err(value_err)?)
}

/// Scores a gold file against a prediction file. Boxes are dequantized at
/// `width` x `height` unless `dims_from_record` is set.
#[pyfunction]
#[pyo3(signature = (gold, pred, iou_threshold = 0.5, ks = vec![1, 5, 10], width = 224, height = 224, dims_from_record = false, bins = locgrid::DEFAULT_BINS))]
#[allow(clippy::too_many_arguments)]
fn score_run<'py>(
    py: Python<'py>,
    gold: &str,
    pred: &str,
    iou_threshold: f64,
    ks: Vec<usize>,
    width: u32,
    height: u32,
    dims_from_record: bool,
    bins: u32,
) -> PyResult<Bound<'py, PyDict>> {
    let open = |p: &str| {
        File::open(p)
            .map(BufReader::new)
            .map_err(|e| PyIOError::new_err(format!("{p}: {e}")))
    };
    let cfg = EvalConfig {
        grid: grid(bins)?,
        iou_threshold,
        ks,
        dims_override: if dims_from_record {
            None
        } else {
            Some(ImageDims::new(width, height).map_err(value_err)?)
        },
        workers: 1,
    };
    let report = metrics::score_run(open(gold)?, open(pred)?, &cfg).map_err(value_err)?;
    let out = PyDict::new(py);
    let recall = PyDict::new(py);
    for (k, r) in &report.recall_at {
        recall.set_item(*k, *r)?;
    }
    out.set_item("recall_at", recall)?;
    out.set_item("accuracy", report.accuracy)?;
    out.set_item("n_items", report.n_items)?;
    out.set_item("n_decode_failures", report.n_decode_failures)?;
    Ok(out)
}

#[pyfunction]
fn rec_prompt(expression: &str) -> PyResult<String> {
    prompts::rec_prompt(expression).map_err(value_err)
}

/// Prompt for the phrase at character offsets `start..end` of `caption`.
#[pyfunction]
fn phrase_grounding_prompt(caption: &str, start: usize, end: usize) -> PyResult<String> {
    let text: String = caption.chars().skip(start).take(end.saturating_sub(start)).collect();
    prompts::phrase_grounding_prompt(caption, &markup::TextSpan { start, end, text }).map_err(value_err)
}

/// Expression-generation prompt; `demos` are `((tl, br), expression)` shots.
#[pyfunction]
#[pyo3(signature = (tl, br, demos = Vec::new(), bins = locgrid::DEFAULT_BINS))]
fn reg_prompt(tl: u32, br: u32, demos: Vec<((u32, u32), String)>, bins: u32) -> PyResult<String> {
    let g = grid(bins)?;
    let query = TokenBoxPair::new(tl, br, g).map_err(value_err)?;
    if demos.is_empty() {
        return prompts::reg_prompt(&query, g).map_err(value_err);
    }
    let shots = demos
        .iter()
        .map(|((a, b), e)| Ok((TokenBoxPair::new(*a, *b, g).map_err(value_err)?, e.as_str())))
        .collect::<PyResult<Vec<_>>>()?;
    prompts::reg_prompt_few_shot(&shots, &query, g).map_err(value_err)
}

/// `(prompt, target)` pairs for one `grit.jsonl` record.
#[pyfunction]
#[pyo3(signature = (record_line, seed = 0, templates = None, bins = locgrid::DEFAULT_BINS))]
fn instruction_examples(
    record_line: &str,
    seed: u64,
    templates: Option<Vec<String>>,
    bins: u32,
) -> PyResult<Vec<(String, String)>> {
    let templates = match templates {
        Some(t) => t
            .into_iter()
            .map(PromptTemplate::new)
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_err)?,
        None => PromptTemplate::defaults(),
    };
    let line: GritLine = serde_json::from_str(record_line).map_err(value_err)?;
    let record = line.to_record().map_err(PyValueError::new_err)?;
    let pairs = prompts::instruction_examples(&record, &templates, seed, grid(bins)?).map_err(value_err)?;
    Ok(pairs.into_iter().map(|p| (p.prompt, p.target)).collect())
}

#[pymodule]
fn grit_toolkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DecodeError", m.py().get_type::<DecodeError>())?;
    m.add("NUM_LOCATION_TOKENS", GridSpec::default().vocab_size())?;
    m.add_class::<PyGroundedCaption>()?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(dequantize, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    m.add_function(wrap_pyfunction!(extract_links, m)?)?;
    m.add_function(wrap_pyfunction!(build_record, m)?)?;
    m.add_function(wrap_pyfunction!(build_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(score_run, m)?)?;
    m.add_function(wrap_pyfunction!(rec_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(phrase_grounding_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(reg_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(instruction_examples, m)?)?;
    Ok(())
}
