use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use grit_core::locgrid::{GridSpec, ImageDims, DEFAULT_BINS};
use grit_core::metrics::{DEFAULT_IOU_THRESHOLD, DEFAULT_KS};
use grit_core::pipeline::{DEFAULT_NMS_THRESHOLD, DEFAULT_SCORE_THRESHOLD};

mod commands;
mod io;

use commands::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "grit",
    version,
    about = "Grounded caption toolkit: location tokens, markup, corpus build, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct GridArgs {
    /// Grid cells per side; the vocabulary holds bins * bins location tokens.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: u32,
}

impl GridArgs {
    pub fn grid(&self) -> Result<GridSpec, CliError> {
        GridSpec::new(self.bins).map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Args, Debug, Clone, Copy)]
pub struct DimArgs {
    #[arg(long, default_value_t = 224)]
    pub width: u32,
    #[arg(long, default_value_t = 224)]
    pub height: u32,
}

impl DimArgs {
    pub fn dims(&self) -> Result<ImageDims, CliError> {
        ImageDims::new(self.width, self.height).map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Gold items, JSONL.
    #[arg(long)]
    pub gold: PathBuf,
    /// Model outputs, JSONL.
    #[arg(long)]
    pub pred: PathBuf,
    /// Matches need IoU strictly above this.
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou: f64,
    #[command(flatten)]
    pub dims: DimArgs,
    /// Dequantize at each gold item's own width and height.
    #[arg(long)]
    pub dims_from_record: bool,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pixel boxes to location tokens.
    Encode {
        /// x1,y1,x2,y2 in pixels; repeat for a multi-box group.
        #[arg(long = "box", required = true, value_parser = parse_box)]
        boxes: Vec<[f64; 4]>,
        #[command(flatten)]
        dims: DimArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Location tokens to pixel boxes at cell centers.
    Decode {
        /// `<loc_a><loc_b>` tokens, or `a,b` index pairs.
        tokens: String,
        #[command(flatten)]
        dims: DimArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Markup lines to structured JSONL.
    Parse {
        #[arg(long, short, default_value = "-")]
        input: PathBuf,
        #[arg(long, short, default_value = "-")]
        output: PathBuf,
        /// Where undecodable lines go; standard error when omitted.
        #[arg(long)]
        rejects: Option<PathBuf>,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Structured JSONL back to markup lines.
    Render {
        #[arg(long, short, default_value = "-")]
        input: PathBuf,
        #[arg(long, short, default_value = "-")]
        output: PathBuf,
        #[arg(long)]
        rejects: Option<PathBuf>,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Parses and detections to grounded records.
    Build {
        #[arg(long)]
        parses: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, short, default_value = "-")]
        output: PathBuf,
        #[arg(long, default_value = "rejects.jsonl")]
        rejects: PathBuf,
        /// Detections must score strictly above this.
        #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD)]
        score_threshold: f64,
        #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD)]
        nms_threshold: f64,
        /// Head words to skip, one per line; the built-in list when omitted.
        #[arg(long, env = "GRIT_STOPLIST")]
        stoplist: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Corpus statistics of a grounded-record file.
    Stats {
        #[arg(default_value = "-")]
        input: PathBuf,
        /// Print JSON instead of the summary line.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        rejects: Option<PathBuf>,
    },
    /// Phrase grounding recall at k.
    EvalGrounding {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        k: Vec<usize>,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Referring expression comprehension accuracy (first box only).
    EvalRec {
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Evaluation prompts and instruction pairs as JSONL.
    Prompts {
        #[arg(value_enum)]
        kind: PromptKind,
        #[arg(long, short, default_value = "-")]
        input: PathBuf,
        #[arg(long, short, default_value = "-")]
        output: PathBuf,
        /// Instruction templates, one per line; the built-in set when omitted.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Demonstrations for `reg`, taken from the first refs of the input.
        #[arg(long, default_value_t = 0)]
        shots: usize,
        #[command(flatten)]
        grid: GridArgs,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    /// Instruction pairs from grounded records.
    Instructions,
    /// Comprehension prompts from gold items.
    Rec,
    /// Phrase grounding prompts from grounded records.
    Grounding,
    /// Expression generation prompts from grounded records.
    Reg,
}

fn parse_box(s: &str) -> Result<[f64; 4], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected x1,y1,x2,y2, got {s:?}"));
    }
    let mut out = [0.0; 4];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p.parse().map_err(|_| format!("not a number: {p:?}"))?;
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Encode { boxes, dims, grid } => commands::encode(&boxes, dims.dims()?, grid.grid()?),
        Command::Decode { tokens, dims, grid } => commands::decode(&tokens, dims.dims()?, grid.grid()?),
        Command::Parse {
            input,
            output,
            rejects,
            grid,
        } => commands::parse(&input, &output, rejects.as_deref(), grid.grid()?),
        Command::Render {
            input,
            output,
            rejects,
            grid,
        } => commands::render(&input, &output, rejects.as_deref(), grid.grid()?),
        Command::Build {
            parses,
            detections,
            output,
            rejects,
            score_threshold,
            nms_threshold,
            stoplist,
            workers,
            grid,
        } => commands::build(commands::BuildArgs {
            parses,
            detections,
            output,
            rejects,
            score_threshold,
            nms_threshold,
            stoplist,
            workers,
            grid: grid.grid()?,
        }),
        Command::Stats { input, json, rejects } => commands::stats(&input, json, rejects.as_deref()),
        Command::EvalGrounding { eval, k, grid } => commands::eval(&eval, k, false, grid.grid()?),
        Command::EvalRec { eval, grid } => commands::eval(&eval, vec![1], true, grid.grid()?),
        Command::Prompts {
            kind,
            input,
            output,
            templates,
            seed,
            shots,
            grid,
        } => commands::prompts(kind, &input, &output, templates.as_deref(), seed, shots, grid.grid()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("grit: {e}");
            ExitCode::from(e.code())
        }
    }
}
