use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use grit_core::geometry::PixelBox;
use grit_core::locgrid::{dequantize_box, quantize_box, GridSpec, ImageDims, TokenBoxPair};
use grit_core::markup::{parse as parse_markup, render_box_group, serialize, GroundedCaption};
use grit_core::metrics::{read_gold, read_predictions, score_items, EvalConfig, GoldLine, MetricsError};
use grit_core::pipeline::io::{build_corpus, stats_from_jsonl, GritLine, Reject};
use grit_core::pipeline::{BuildConfig, Stoplist};
use grit_core::prompts::{
    instruction_examples, phrase_grounding_prompt, rec_prompt, reg_prompt, reg_prompt_few_shot, PromptTemplate,
};
use serde_json::json;
use thiserror::Error;

use crate::io::{open_input, open_output, open_rejects, write_json_line};
use crate::{EvalArgs, PromptKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) | CliError::Json(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

fn rejected(count: usize, what: &str) -> Result<(), CliError> {
    if count == 0 {
        Ok(())
    } else {
        Err(CliError::Data(format!("rejected {what}: {count}")))
    }
}

/// Calls `f` on every non-blank line, sending failures to `rejects`.
/// Returns the number of rejected lines.
fn each_line(
    input: impl BufRead,
    source: &str,
    rejects: &mut dyn Write,
    mut f: impl FnMut(&str) -> Result<(), String>,
) -> Result<usize, CliError> {
    let mut bad = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Err(reason) = f(&line) {
            bad += 1;
            let reject = Reject {
                source: source.to_string(),
                line: i + 1,
                image_id: None,
                reason,
            };
            write_json_line(rejects, &reject)?;
        }
    }
    rejects.flush()?;
    Ok(bad)
}

pub fn encode(boxes: &[[f64; 4]], dims: ImageDims, grid: GridSpec) -> Result<(), CliError> {
    let pairs = boxes
        .iter()
        .map(|b| {
            let b = PixelBox::try_from(*b).map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(quantize_box(&b, dims, grid))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let group = render_box_group(&pairs);
    println!("{}", &group["<box>".len()..group.len() - "</box>".len()]);
    Ok(())
}

fn token_indices(text: &str) -> Result<Vec<u32>, String> {
    if !text.contains('<') {
        return text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| format!("not a token index: {s:?}")))
            .collect();
    }
    let mut out = Vec::new();
    for tag in text.split('<').map(str::trim).filter(|s| !s.is_empty()) {
        let name = tag
            .strip_suffix('>')
            .ok_or_else(|| format!("unterminated token <{tag}"))?;
        match name {
            "box" | "/box" | "delim" => {}
            _ => {
                let index = name
                    .strip_prefix("loc_")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| format!("not a location token: <{name}>"))?;
                out.push(index);
            }
        }
    }
    Ok(out)
}

pub fn decode(tokens: &str, dims: ImageDims, grid: GridSpec) -> Result<(), CliError> {
    let indices = token_indices(tokens).map_err(CliError::Usage)?;
    if indices.is_empty() || indices.len() % 2 != 0 {
        return Err(CliError::Usage(format!(
            "expected pairs of location tokens, got {}",
            indices.len()
        )));
    }
    for pair in indices.chunks(2) {
        let pair = TokenBoxPair::new(pair[0], pair[1], grid).map_err(|e| CliError::Usage(e.to_string()))?;
        let b = dequantize_box(&pair, dims, grid);
        println!("{}", serde_json::to_string(&b)?);
    }
    Ok(())
}

pub fn parse(input: &Path, output: &Path, rejects: Option<&Path>, grid: GridSpec) -> Result<(), CliError> {
    let mut out = open_output(output)?;
    let mut rej = open_rejects(rejects)?;
    let bad = each_line(open_input(input)?, "input", &mut rej, |line| {
        let doc = parse_markup(line, grid).map_err(|e| e.to_string())?;
        write_json_line(&mut out, &doc).map_err(|e| e.to_string())
    })?;
    out.flush()?;
    rejected(bad, "lines")
}

pub fn render(input: &Path, output: &Path, rejects: Option<&Path>, grid: GridSpec) -> Result<(), CliError> {
    let mut out = open_output(output)?;
    let mut rej = open_rejects(rejects)?;
    let bad = each_line(open_input(input)?, "input", &mut rej, |line| {
        let doc: GroundedCaption = serde_json::from_str(line).map_err(|e| format!("schema: {e}"))?;
        let text = serialize(&doc, grid).map_err(|e| e.to_string())?;
        writeln!(out, "{text}").map_err(|e| e.to_string())
    })?;
    out.flush()?;
    rejected(bad, "lines")
}

pub struct BuildArgs {
    pub parses: PathBuf,
    pub detections: PathBuf,
    pub output: PathBuf,
    pub rejects: PathBuf,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub stoplist: Option<PathBuf>,
    pub workers: usize,
    pub grid: GridSpec,
}

pub fn build(args: BuildArgs) -> Result<(), CliError> {
    let stoplist = match &args.stoplist {
        Some(p) => Stoplist::parse(
            &fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => Stoplist::builtin(),
    };
    let config = BuildConfig {
        grid: args.grid,
        score_threshold: args.score_threshold,
        nms_threshold: args.nms_threshold,
        stoplist,
    };
    config.check().map_err(|e| CliError::Usage(e.to_string()))?;
    let summary = build_corpus(
        open_input(&args.parses)?,
        open_input(&args.detections)?,
        open_output(&args.output)?,
        open_output(&args.rejects)?,
        &config,
        args.workers,
    )?;
    eprintln!("{}", serde_json::to_string(&summary)?);
    rejected(summary.rejected as usize, "records")
}

pub fn stats(input: &Path, as_json: bool, rejects: Option<&Path>) -> Result<(), CliError> {
    let (stats, bad) = stats_from_jsonl(open_input(input)?)?;
    let mut rej = open_rejects(rejects)?;
    for r in &bad {
        write_json_line(&mut rej, r)?;
    }
    rej.flush()?;
    if as_json {
        println!("{}", stats.to_json());
    } else {
        println!("{stats}");
    }
    rejected(bad.len(), "records")
}

fn metrics_error(e: MetricsError) -> CliError {
    match e {
        MetricsError::ZeroK | MetricsError::Threshold(_) => CliError::Usage(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

pub fn eval(args: &EvalArgs, ks: Vec<usize>, first_box_only: bool, grid: GridSpec) -> Result<(), CliError> {
    let items = read_gold(open_input(&args.gold)?).map_err(metrics_error)?;
    let preds = read_predictions(open_input(&args.pred)?).map_err(metrics_error)?;
    if first_box_only {
        if let Some(i) = items.iter().find(|i| i.gold_boxes.len() != 1) {
            return Err(metrics_error(MetricsError::NotSingleGold(i.id.clone())));
        }
    }
    let cfg = EvalConfig {
        grid,
        iou_threshold: args.iou,
        ks,
        dims_override: if args.dims_from_record {
            None
        } else {
            Some(args.dims.dims()?)
        },
        workers: args.workers,
    };
    let report = score_items(&items, &preds, &cfg).map_err(metrics_error)?;
    let machine = serde_json::to_string(&report)?;
    println!("{report}");
    println!("{machine}");
    if let Some(path) = &args.report {
        let mut out = open_output(path)?;
        writeln!(out, "{machine}")?;
        out.flush()?;
    }
    Ok(())
}

fn load_templates(path: Option<&Path>) -> Result<Vec<PromptTemplate>, CliError> {
    let Some(path) = path else {
        return Ok(PromptTemplate::defaults());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let templates = PromptTemplate::parse_file(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    if templates.is_empty() {
        return Err(CliError::Usage(format!("{} holds no templates", path.display())));
    }
    Ok(templates)
}

fn grit_line(line: &str) -> Result<GritLine, String> {
    serde_json::from_str(line).map_err(|e| format!("schema: {e}"))
}

pub fn prompts(
    kind: PromptKind,
    input: &Path,
    output: &Path,
    templates: Option<&Path>,
    seed: u64,
    shots: usize,
    grid: GridSpec,
) -> Result<(), CliError> {
    let templates = load_templates(templates)?;
    let mut out = open_output(output)?;
    let mut rej = io::stderr();
    let mut demos: Vec<(TokenBoxPair, String)> = Vec::new();
    let bad = each_line(open_input(input)?, "input", &mut rej, |line| {
        let emit = |out: &mut Box<dyn Write>, v: serde_json::Value| write_json_line(out, &v).map_err(|e| e.to_string());
        match kind {
            PromptKind::Instructions => {
                let rec = grit_line(line)?.to_record()?;
                for pair in instruction_examples(&rec, &templates, seed, grid).map_err(|e| e.to_string())? {
                    write_json_line(&mut out, &pair).map_err(|e| e.to_string())?;
                }
            }
            PromptKind::Rec => {
                let gold: GoldLine = serde_json::from_str(line).map_err(|e| format!("schema: {e}"))?;
                let prompt = rec_prompt(&gold.phrase).map_err(|e| e.to_string())?;
                emit(&mut out, json!({ "id": gold.id, "prompt": prompt }))?;
            }
            PromptKind::Grounding => {
                let rec = grit_line(line)?;
                let doc = parse_markup(&rec.grounded_text, grid).map_err(|e| e.to_string())?;
                for link in &doc.links {
                    let prompt = phrase_grounding_prompt(&doc.caption, &link.span).map_err(|e| e.to_string())?;
                    let target = render_box_group(&link.boxes);
                    emit(
                        &mut out,
                        json!({ "image_id": rec.image_id, "prompt": prompt, "target": target }),
                    )?;
                }
            }
            PromptKind::Reg => {
                let rec = grit_line(line)?.to_record()?;
                for r in &rec.refs {
                    let pair = quantize_box(&r.boxes[0], rec.dims, grid);
                    if demos.len() < shots {
                        demos.push((pair, r.span.text.clone()));
                        continue;
                    }
                    let prompt = if shots == 0 {
                        reg_prompt(&pair, grid)
                    } else {
                        let shown: Vec<(TokenBoxPair, &str)> = demos.iter().map(|(p, t)| (*p, t.as_str())).collect();
                        reg_prompt_few_shot(&shown, &pair, grid)
                    }
                    .map_err(|e| e.to_string())?;
                    emit(
                        &mut out,
                        json!({ "image_id": rec.image_id, "prompt": prompt, "reference": r.span.text }),
                    )?;
                }
            }
        }
        Ok(())
    })?;
    out.flush()?;
    rejected(bad, "lines")
}
