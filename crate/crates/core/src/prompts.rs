//! Evaluation prompts and grounded instruction pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::locgrid::{quantize_box, GridError, GridSpec, TokenBoxPair};
use crate::markup::{render_box_group, TextSpan};
use crate::pipeline::GritRecord;

/// Image slot plus grounding marker, ahead of every evaluation prompt.
pub const PREAMBLE: &str = "<s> <image> </image> <grounding> ";

/// Expression-generation templates used for the box-to-text direction.
pub const DEFAULT_TEMPLATES: [&str; 6] = [
    "What is <p> it </p><box>{loc_tl}{loc_br}</box>? It is {expression}.",
    "What is <p> this </p><box>{loc_tl}{loc_br}</box>? This is {expression}.",
    "Describe <p> this object </p><box>{loc_tl}{loc_br}</box>. This object is {expression}.",
    "<p> It </p><box>{loc_tl}{loc_br}</box> is {expression}.",
    "<p> This </p><box>{loc_tl}{loc_br}</box> is {expression}.",
    "<p> The object </p><box>{loc_tl}{loc_br}</box> is {expression}.",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("span {start}..{end} does not fit a caption of {len} characters")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("span text {0:?} does not match the caption")]
    SpanMismatch(String),
    #[error("expression is empty")]
    EmptyExpression,
    #[error("text contains a markup token: {0:?}")]
    MarkupInText(String),
    #[error("template has unknown placeholder {{{0}}}")]
    UnknownPlaceholder(String),
    #[error("template {0:?} has no {{expression}} placeholder")]
    NoExpression(String),
    #[error("template {0:?} needs both {{loc_tl}} and {{loc_br}}")]
    MissingLocation(String),
    #[error("no templates given")]
    NoTemplates,
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn reject_markup(text: &str) -> Result<(), PromptError> {
    let probe = crate::markup::GroundedCaption::new(text, Vec::new());
    match crate::markup::serialize(&probe, GridSpec::default()) {
        Ok(_) => Ok(()),
        Err(_) => Err(PromptError::MarkupInText(text.to_string())),
    }
}

/// Caption prefix up to the phrase, then the phrase wrapped in `<p>..</p>`.
pub fn phrase_grounding_prompt(caption: &str, phrase: &TextSpan) -> Result<String, PromptError> {
    let chars: Vec<(usize, char)> = caption.char_indices().collect();
    let len = chars.len();
    if phrase.start >= phrase.end || phrase.end > len {
        return Err(PromptError::SpanOutOfBounds {
            start: phrase.start,
            end: phrase.end,
            len,
        });
    }
    let byte = |c: usize| chars.get(c).map_or(caption.len(), |(b, _)| *b);
    let (start, end) = (byte(phrase.start), byte(phrase.end));
    if caption[start..end] != phrase.text {
        return Err(PromptError::SpanMismatch(phrase.text.clone()));
    }
    let prefix = &caption[..start];
    reject_markup(prefix)?;
    reject_markup(&phrase.text)?;
    Ok(format!("{PREAMBLE}{prefix}<p> {} </p>", phrase.text))
}

/// Referring-expression comprehension input.
pub fn rec_prompt(expression: &str) -> Result<String, PromptError> {
    if expression.trim().is_empty() {
        return Err(PromptError::EmptyExpression);
    }
    reject_markup(expression)?;
    Ok(format!("{PREAMBLE}<p> {expression} </p>"))
}

fn checked(pair: &TokenBoxPair, grid: GridSpec) -> Result<TokenBoxPair, GridError> {
    TokenBoxPair::new(pair.tl.0, pair.br.0, grid)
}

/// Referring-expression generation input: the model continues after `is`.
pub fn reg_prompt(pair: &TokenBoxPair, grid: GridSpec) -> Result<String, PromptError> {
    let pair = checked(pair, grid)?;
    Ok(format!("{PREAMBLE}<p> It </p>{} is", render_box_group(&[pair])))
}

/// Few-shot variant: each demonstration is a completed zero-shot prompt
/// closed by `</s>`, followed by the query prompt.
pub fn reg_prompt_few_shot(
    demos: &[(TokenBoxPair, &str)],
    query: &TokenBoxPair,
    grid: GridSpec,
) -> Result<String, PromptError> {
    let mut out = String::new();
    for (pair, expression) in demos {
        if expression.trim().is_empty() {
            return Err(PromptError::EmptyExpression);
        }
        reject_markup(expression)?;
        out.push_str(&reg_prompt(pair, grid)?);
        out.push(' ');
        out.push_str(expression);
        out.push_str(" </s> ");
    }
    out.push_str(&reg_prompt(query, grid)?);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ExpressionToBoxes,
    BoxesToExpression,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pattern: String,
    direction: Direction,
}

const EXPRESSION: &str = "{expression}";
const LOC_TL: &str = "{loc_tl}";
const LOC_BR: &str = "{loc_br}";

impl PromptTemplate {
    /// Checks placeholders. The direction follows placeholder order: a
    /// template asking for the expression after the box generates text.
    pub fn new(pattern: impl Into<String>) -> Result<Self, PromptError> {
        let pattern = pattern.into();
        let mut rest = pattern.as_str();
        while let Some(open) = rest.find('{') {
            let Some(close) = rest[open..].find('}') else { break };
            let name = &rest[open + 1..open + close];
            if !matches!(name, "expression" | "loc_tl" | "loc_br") {
                return Err(PromptError::UnknownPlaceholder(name.to_string()));
            }
            rest = &rest[open + close + 1..];
        }
        let Some(expr_at) = pattern.find(EXPRESSION) else {
            return Err(PromptError::NoExpression(pattern));
        };
        let (Some(tl_at), Some(_)) = (pattern.find(LOC_TL), pattern.find(LOC_BR)) else {
            return Err(PromptError::MissingLocation(pattern));
        };
        let direction = if expr_at > tl_at {
            Direction::BoxesToExpression
        } else {
            Direction::ExpressionToBoxes
        };
        Ok(Self { pattern, direction })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn defaults() -> Vec<PromptTemplate> {
        DEFAULT_TEMPLATES
            .iter()
            .map(|p| PromptTemplate::new(*p).expect("built-in templates are valid"))
            .collect()
    }

    /// One pattern per line; blank lines and `#` comments are skipped.
    pub fn parse_file(text: &str) -> Result<Vec<PromptTemplate>, PromptError> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(PromptTemplate::new)
            .collect()
    }

    /// Fills the placeholders. With several boxes a `{loc_tl}{loc_br}` run
    /// becomes the whole `<delim>`-joined list; lone placeholders take the
    /// first box.
    fn fill(pattern: &str, expression: &str, boxes: &[TokenBoxPair]) -> String {
        let joined = {
            let group = render_box_group(boxes);
            group["<box>".len()..group.len() - "</box>".len()].to_string()
        };
        let first = boxes[0];
        pattern
            .replace(&format!("{LOC_TL}{LOC_BR}"), &joined)
            .replace(LOC_TL, &format!("<loc_{}>", first.tl.0))
            .replace(LOC_BR, &format!("<loc_{}>", first.br.0))
            .replace(EXPRESSION, expression)
    }

    /// Splits the filled template into the part the model reads and the
    /// part it should produce. `prompt + target` is the filled template.
    pub fn instantiate(&self, expression: &str, boxes: &[TokenBoxPair]) -> InstructionPair {
        let cut = match self.direction {
            Direction::BoxesToExpression => self.pattern.find(EXPRESSION).unwrap(),
            Direction::ExpressionToBoxes => {
                let at = self.pattern.find(LOC_TL).unwrap();
                if self.pattern[..at].ends_with("<box>") {
                    at - "<box>".len()
                } else {
                    at
                }
            }
        };
        let full = Self::fill(&self.pattern, expression, boxes);
        let head_len = Self::fill(&self.pattern[..cut], expression, boxes).trim_end().len();
        InstructionPair {
            prompt: full[..head_len].to_string(),
            target: full[head_len..].to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub prompt: String,
    pub target: String,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Two pairs per ref: `<p> expression </p>` answered by its boxes, and a
/// seeded template asking for the expression from its boxes.
pub fn instruction_examples(
    record: &GritRecord,
    templates: &[PromptTemplate],
    seed: u64,
    grid: GridSpec,
) -> Result<Vec<InstructionPair>, PromptError> {
    if templates.is_empty() {
        return Err(PromptError::NoTemplates);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(record.image_id.as_bytes()));
    let mut out = Vec::with_capacity(record.refs.len() * 2);
    for r in &record.refs {
        let expression = r.span.text.as_str();
        reject_markup(expression)?;
        let boxes: Vec<TokenBoxPair> = r.boxes.iter().map(|b| quantize_box(b, record.dims, grid)).collect();
        if boxes.is_empty() {
            continue;
        }
        out.push(InstructionPair {
            prompt: format!("<p> {expression} </p>"),
            target: render_box_group(&boxes),
        });
        let template = &templates[rng.random_range(0..templates.len())];
        out.push(template.instantiate(expression, &boxes));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PixelBox;
    use crate::locgrid::ImageDims;
    use crate::markup::{extract_links, parse};
    use crate::pipeline::{ExpressionSpan, GritRef};

    fn g() -> GridSpec {
        GridSpec::default()
    }

    fn pair(a: u32, b: u32) -> TokenBoxPair {
        TokenBoxPair::new(a, b, g()).unwrap()
    }

    fn span_of(caption: &str, phrase: &str) -> TextSpan {
        let start = caption[..caption.find(phrase).unwrap()].chars().count();
        TextSpan {
            start,
            end: start + phrase.chars().count(),
            text: phrase.into(),
        }
    }

    const CAPTION: &str = "A man in a blue hard hat and orange safety vest stands in an intersection.";

    #[test]
    fn phrase_grounding_examples() {
        let p = phrase_grounding_prompt(CAPTION, &span_of(CAPTION, "orange safety vest")).unwrap();
        assert_eq!(
            p,
            "<s> <image> </image> <grounding> A man in a blue hard hat and <p> orange safety vest </p>"
        );
        let p = phrase_grounding_prompt(CAPTION, &span_of(CAPTION, "A man")).unwrap();
        assert_eq!(p, "<s> <image> </image> <grounding> <p> A man </p>");
        let whole = phrase_grounding_prompt("a cat", &span_of("a cat", "a cat")).unwrap();
        assert_eq!(whole, "<s> <image> </image> <grounding> <p> a cat </p>");

        let bad = TextSpan {
            start: 3,
            end: 99,
            text: "x".into(),
        };
        assert!(matches!(
            phrase_grounding_prompt(CAPTION, &bad),
            Err(PromptError::SpanOutOfBounds { .. })
        ));
    }

    #[test]
    fn rec_examples() {
        assert_eq!(
            rec_prompt("A man in a blue hard hat and orange safety vest").unwrap(),
            "<s> <image> </image> <grounding> <p> A man in a blue hard hat and orange safety vest </p>"
        );
        assert_eq!(
            rec_prompt("dog").unwrap(),
            "<s> <image> </image> <grounding> <p> dog </p>"
        );
        assert!(matches!(
            rec_prompt("the <box> thing"),
            Err(PromptError::MarkupInText(_))
        ));
        assert_eq!(rec_prompt(""), Err(PromptError::EmptyExpression));
    }

    #[test]
    fn reg_examples() {
        let p = reg_prompt(&pair(44, 863), g()).unwrap();
        assert_eq!(
            p,
            "<s> <image> </image> <grounding> <p> It </p><box><loc_44><loc_863></box> is"
        );
        let doc = parse(p.strip_suffix(" is").unwrap(), g()).unwrap();
        assert_eq!(doc.links[0].boxes, vec![pair(44, 863)]);

        let full = reg_prompt(&pair(0, 1023), g()).unwrap();
        assert!(full.contains("<box><loc_0><loc_1023></box> is"));

        let few = reg_prompt_few_shot(
            &[(pair(1, 40), "a red car"), (pair(2, 99), "the tree")],
            &pair(44, 863),
            g(),
        )
        .unwrap();
        assert_eq!(
            few,
            "<s> <image> </image> <grounding> <p> It </p><box><loc_1><loc_40></box> is a red car </s> \
             <s> <image> </image> <grounding> <p> It </p><box><loc_2><loc_99></box> is the tree </s> \
             <s> <image> </image> <grounding> <p> It </p><box><loc_44><loc_863></box> is"
        );
    }

    fn record(refs: &[(&str, Vec<PixelBox>)]) -> GritRecord {
        GritRecord {
            image_id: "img".into(),
            dims: ImageDims::new(224, 224).unwrap(),
            caption: String::new(),
            refs: refs
                .iter()
                .enumerate()
                .map(|(i, (t, b))| GritRef {
                    span: ExpressionSpan {
                        start: 0,
                        end: 1,
                        source_chunk: i,
                        text: t.to_string(),
                    },
                    boxes: b.clone(),
                })
                .collect(),
            grounded_text: String::new(),
        }
    }

    #[test]
    fn instruction_pairs() {
        let b = PixelBox::new(10., 10., 100., 200.).unwrap();
        let rec = record(&[("a dog in a field of flowers", vec![b])]);
        let pairs = instruction_examples(&rec, &PromptTemplate::defaults(), 7, g()).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].prompt, "<p> a dog in a field of flowers </p>");
        assert_eq!(pairs[0].target, "<box><loc_33><loc_910></box>");
        assert!(pairs[1].target.starts_with(" a dog in a field of flowers"));
        let joined = format!("{}{}", pairs[1].prompt, pairs[1].target);
        assert!(parse(&joined, g()).is_ok(), "{joined}");

        assert_eq!(
            instruction_examples(&rec, &PromptTemplate::defaults(), 7, g()).unwrap(),
            pairs
        );
        assert!(instruction_examples(&record(&[]), &PromptTemplate::defaults(), 7, g())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn first_table_template() {
        let t = PromptTemplate::new(DEFAULT_TEMPLATES[0]).unwrap();
        assert_eq!(t.direction(), Direction::BoxesToExpression);
        let p = t.instantiate("a dog", &[pair(33, 910)]);
        assert_eq!(p.prompt, "What is <p> it </p><box><loc_33><loc_910></box>? It is");
        assert_eq!(p.target, " a dog.");
    }

    #[test]
    fn multi_box_and_reverse_templates() {
        let t = PromptTemplate::new("<p> It </p><box>{loc_tl}{loc_br}</box> is {expression}.").unwrap();
        let p = t.instantiate("two dogs", &[pair(0, 33), pair(66, 99)]);
        assert_eq!(
            p.prompt,
            "<p> It </p><box><loc_0><loc_33><delim><loc_66><loc_99></box> is"
        );

        let rev = PromptTemplate::new("Where is <p> {expression} </p>? <box>{loc_tl}{loc_br}</box>").unwrap();
        assert_eq!(rev.direction(), Direction::ExpressionToBoxes);
        let p = rev.instantiate("a cat", &[pair(1, 40)]);
        assert_eq!(p.prompt, "Where is <p> a cat </p>?");
        assert_eq!(p.target, " <box><loc_1><loc_40></box>");
        let (links, failed) = extract_links(&format!("{}{}", p.prompt, p.target), g());
        assert!(!failed && links.len() == 1);
    }

    #[test]
    fn template_validation() {
        assert_eq!(
            PromptTemplate::new("{what} {expression} {loc_tl}{loc_br}"),
            Err(PromptError::UnknownPlaceholder("what".into()))
        );
        assert!(matches!(
            PromptTemplate::new("<box>{loc_tl}{loc_br}</box>"),
            Err(PromptError::NoExpression(_))
        ));
        assert!(matches!(
            PromptTemplate::new("{expression} {loc_tl}"),
            Err(PromptError::MissingLocation(_))
        ));
        let parsed =
            PromptTemplate::parse_file("# comment\n\n<p> It </p><box>{loc_tl}{loc_br}</box> is {expression}.\n")
                .unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(
            PromptTemplate::parse_file(include_str!("../data/refer_templates.txt")).unwrap(),
            PromptTemplate::defaults()
        );
    }
}
