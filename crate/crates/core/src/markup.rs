//! Grounded-caption markup.
//!
//! A grounded caption binds text spans to boxes in a hyperlink-like form:
//!
//! ```text
//! <s> <image> </image> <grounding> <p> It </p><box><loc_44><loc_863></box> seats next to <p> a campfire </p><box><loc_4><loc_1007></box> </s>
//! ```
//!
//! Grammar (whitespace between markup tokens is tolerated on input):
//!
//! ```text
//! seq   := "<s>"? image? "<grounding>"? (text | link)* "</s>"?
//! image := "<image>" opaque "</image>"
//! link  := "<p>" text "</p>" "<box>" pair ("<delim>" pair)* "</box>"
//! pair  := loc loc
//! loc   := "<loc_" k ">"        k decimal, k < P*P
//! ```
//!
//! [`serialize`] always produces the canonical spacing: one space inside
//! `<p> .. </p>`, nothing between `</p>` and `<box>` or inside the box
//! group, one space after the header tokens and before `</s>`.
//! [`parse`] is strict and fails on the first violation. [`extract_links`]
//! is the lenient reader used on model outputs.
//!
//! There is no escaping: captions containing anything shaped like a markup
//! token (`<name>`) cannot be serialized.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::locgrid::{cell_of_token, GridError, GridSpec, LocToken, TokenBoxPair};

/// Character offsets into the caption, `end` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundLink {
    pub span: TextSpan,
    pub boxes: Vec<TokenBoxPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedCaption {
    pub caption: String,
    pub links: Vec<GroundLink>,
    #[serde(default)]
    pub has_bos: bool,
    /// `Some` when an `<image> .. </image>` slot is present. The payload is
    /// opaque and empty for anything this crate produces.
    #[serde(default)]
    pub image_payload: Option<String>,
    #[serde(default)]
    pub has_grounding_marker: bool,
    #[serde(default)]
    pub has_eos: bool,
}

impl GroundedCaption {
    pub fn new(caption: impl Into<String>, links: Vec<GroundLink>) -> Self {
        Self {
            caption: caption.into(),
            links,
            has_bos: false,
            image_payload: None,
            has_grounding_marker: false,
            has_eos: false,
        }
    }

    pub fn with_grounding_marker(mut self) -> Self {
        self.has_grounding_marker = true;
        self
    }

    /// Wraps the caption as `<s> <image> </image> ... </s>`.
    pub fn with_image_slot(mut self) -> Self {
        self.has_bos = true;
        self.image_payload = Some(String::new());
        self.has_eos = true;
        self
    }

    pub fn has_image_slot(&self) -> bool {
        self.image_payload.is_some()
    }
}

/// A box group recovered by [`extract_links`]. `phrase` is `None` for a bare
/// `<box>` group with no `<p>..</p>` directly before it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedLink {
    pub phrase: Option<String>,
    pub boxes: Vec<TokenBoxPair>,
}

impl From<&GroundLink> for ExtractedLink {
    fn from(link: &GroundLink) -> Self {
        Self {
            phrase: Some(link.span.text.clone()),
            boxes: link.boxes.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeReason {
    UnclosedBox,
    OddLocationCount,
    EmptyBox,
    MissingDelimiter,
    UnknownToken,
    UnexpectedToken,
    SpanWithoutBox,
    BoxWithoutSpan,
    UnclosedSpan,
    EmptySpan,
    UnclosedImage,
    TokenOutOfRange,
    InvertedPair,
    TrailingText,
}

impl fmt::Display for DecodeReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DecodeReason::UnclosedBox => "unclosed box group",
            DecodeReason::OddLocationCount => "odd location-token count in a box group",
            DecodeReason::EmptyBox => "box group without location tokens",
            DecodeReason::MissingDelimiter => "more than one pair without <delim>",
            DecodeReason::UnknownToken => "unknown token",
            DecodeReason::UnexpectedToken => "token not allowed here",
            DecodeReason::SpanWithoutBox => "span without box group",
            DecodeReason::BoxWithoutSpan => "box group without preceding span",
            DecodeReason::UnclosedSpan => "unclosed span",
            DecodeReason::EmptySpan => "empty span",
            DecodeReason::UnclosedImage => "unclosed image slot",
            DecodeReason::TokenOutOfRange => "location token index out of range",
            DecodeReason::InvertedPair => "top-left token after bottom-right token",
            DecodeReason::TrailingText => "text after </s>",
        };
        f.write_str(s)
    }
}

/// `position` is a character offset into the input.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{reason} at character {position}")]
pub struct DecodeFailure {
    pub position: usize,
    pub reason: DecodeReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("text contains a markup token at character {0}")]
    MarkupInText(usize),
    #[error("link {0} has no boxes")]
    NoBoxes(usize),
    #[error("link {0} has an empty or out-of-bounds span")]
    BadSpan(usize),
    #[error("link {0} text does not match the caption")]
    SpanTextMismatch(usize),
    #[error("link {0} overlaps or precedes the previous link")]
    Overlap(usize),
    #[error("image payload may not contain </image>")]
    BadImagePayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Bos,
    Eos,
    Image,
    ImageEnd,
    Grounding,
    SpanOpen,
    SpanClose,
    BoxOpen,
    BoxClose,
    Delim,
    /// Index as written; may exceed any grid.
    Loc(u64),
    Unknown,
}

fn classify(name: &str) -> Tag {
    match name {
        "s" => Tag::Bos,
        "/s" => Tag::Eos,
        "image" => Tag::Image,
        "/image" => Tag::ImageEnd,
        "grounding" => Tag::Grounding,
        "p" => Tag::SpanOpen,
        "/p" => Tag::SpanClose,
        "box" => Tag::BoxOpen,
        "/box" => Tag::BoxClose,
        "delim" => Tag::Delim,
        _ => match name.strip_prefix("loc_") {
            Some(d) if !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()) => {
                Tag::Loc(d.parse().unwrap_or(u64::MAX))
            }
            _ => Tag::Unknown,
        },
    }
}

/// Recognises `<name>` at byte `pos`, where name is `[A-Za-z0-9_/]+`.
/// Anything else starting with `<` is ordinary text.
fn read_tag(s: &str, pos: usize) -> Option<(Tag, usize)> {
    let bytes = s.as_bytes();
    if bytes.get(pos) != Some(&b'<') {
        return None;
    }
    let mut i = pos + 1;
    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'/') {
        i += 1;
    }
    if i == pos + 1 || bytes.get(i) != Some(&b'>') {
        return None;
    }
    Some((classify(&s[pos + 1..i]), i + 1))
}

#[derive(Debug, Clone, Copy)]
enum Item {
    Text { start: usize, end: usize },
    Tag { tag: Tag, start: usize, end: usize },
}

/// Splits the input into text runs and markup tokens (byte offsets).
fn lex(s: &str) -> Vec<Item> {
    let mut items = Vec::new();
    let mut text_start = 0;
    let mut pos = 0;
    while let Some(off) = s[pos..].find('<') {
        let at = pos + off;
        match read_tag(s, at) {
            Some((tag, end)) => {
                if at > text_start {
                    items.push(Item::Text {
                        start: text_start,
                        end: at,
                    });
                }
                items.push(Item::Tag { tag, start: at, end });
                text_start = end;
                pos = end;
            }
            None => pos = at + 1,
        }
    }
    if text_start < s.len() {
        items.push(Item::Text {
            start: text_start,
            end: s.len(),
        });
    }
    items
}

/// First markup-shaped token in `s`, as a character offset.
fn find_markup(s: &str) -> Option<usize> {
    lex(s).into_iter().find_map(|it| match it {
        Item::Tag { start, .. } => Some(s[..start].chars().count()),
        Item::Text { .. } => None,
    })
}

fn push_pair(out: &mut String, pair: &TokenBoxPair) {
    use std::fmt::Write;
    let _ = write!(out, "<loc_{}><loc_{}>", pair.tl.0, pair.br.0);
}

/// `<box>` + pairs joined by `<delim>` + `</box>`.
pub fn render_box_group(boxes: &[TokenBoxPair]) -> String {
    let mut out = String::with_capacity(8 + boxes.len() * 24);
    out.push_str("<box>");
    for (i, pair) in boxes.iter().enumerate() {
        if i > 0 {
            out.push_str("<delim>");
        }
        push_pair(&mut out, pair);
    }
    out.push_str("</box>");
    out
}

fn check_pair(pair: &TokenBoxPair, grid: GridSpec) -> Result<(), GridError> {
    TokenBoxPair::new(pair.tl.0, pair.br.0, grid).map(|_| ())
}

/// Renders the canonical markup string for `doc`.
pub fn serialize(doc: &GroundedCaption, grid: GridSpec) -> Result<String, EncodeError> {
    if let Some(at) = find_markup(&doc.caption) {
        return Err(EncodeError::MarkupInText(at));
    }
    // char offset -> byte offset, with one trailing entry for the end
    let byte_at: Vec<usize> = doc
        .caption
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(doc.caption.len()))
        .collect();
    let n_chars = byte_at.len() - 1;

    let mut out = String::with_capacity(doc.caption.len() + 64 + doc.links.len() * 48);
    let mut header = Vec::new();
    if doc.has_bos {
        header.push("<s>".to_string());
    }
    if let Some(payload) = &doc.image_payload {
        if payload.contains("</image>") {
            return Err(EncodeError::BadImagePayload);
        }
        if payload.is_empty() {
            header.push("<image> </image>".to_string());
        } else {
            header.push(format!("<image> {payload} </image>"));
        }
    }
    if doc.has_grounding_marker {
        header.push("<grounding>".to_string());
    }
    if !header.is_empty() {
        out.push_str(&header.join(" "));
        out.push(' ');
    }

    let mut cursor = 0usize;
    for (i, link) in doc.links.iter().enumerate() {
        let span = &link.span;
        if span.start >= span.end || span.end > n_chars {
            return Err(EncodeError::BadSpan(i));
        }
        if span.start < cursor {
            return Err(EncodeError::Overlap(i));
        }
        if link.boxes.is_empty() {
            return Err(EncodeError::NoBoxes(i));
        }
        let covered = &doc.caption[byte_at[span.start]..byte_at[span.end]];
        if covered != span.text {
            return Err(EncodeError::SpanTextMismatch(i));
        }
        for pair in &link.boxes {
            check_pair(pair, grid)?;
        }
        out.push_str(&doc.caption[byte_at[cursor]..byte_at[span.start]]);
        out.push_str("<p> ");
        out.push_str(covered);
        out.push_str(" </p>");
        out.push_str(&render_box_group(&link.boxes));
        cursor = span.end;
    }
    out.push_str(&doc.caption[byte_at[cursor]..]);
    if doc.has_eos {
        out.push_str(" </s>");
    }
    Ok(out)
}

/// Drops at most one leading and one trailing space.
fn trim_one(s: &str) -> &str {
    let s = s.strip_prefix(' ').unwrap_or(s);
    s.strip_suffix(' ').unwrap_or(s)
}

fn is_blank(s: &str, start: usize, end: usize) -> bool {
    s[start..end].chars().all(char::is_whitespace)
}

struct Failure {
    byte: usize,
    reason: DecodeReason,
}

impl Failure {
    fn at(byte: usize, reason: DecodeReason) -> Self {
        Self { byte, reason }
    }

    fn into_decode(self, s: &str) -> DecodeFailure {
        DecodeFailure {
            position: s[..self.byte].chars().count(),
            reason: self.reason,
        }
    }
}

/// Reads a box group whose `<box>` is `items[open]`. On success returns the
/// pairs and the index just past `</box>`.
fn read_box_group(
    s: &str,
    items: &[Item],
    open: usize,
    grid: GridSpec,
) -> Result<(Vec<TokenBoxPair>, usize), (Failure, usize)> {
    let group_start = match items[open] {
        Item::Tag { start, .. } => start,
        Item::Text { start, .. } => start,
    };
    // each segment: (byte offset of the opening <box>/<delim>, locs)
    let mut segments: Vec<(usize, Vec<(u64, usize)>)> = vec![(group_start, Vec::new())];
    let mut i = open + 1;
    loop {
        let Some(item) = items.get(i) else {
            return Err((Failure::at(group_start, DecodeReason::UnclosedBox), i));
        };
        match *item {
            Item::Text { start, end } if is_blank(s, start, end) => {}
            Item::Tag {
                tag: Tag::Loc(k),
                start,
                ..
            } => segments.last_mut().unwrap().1.push((k, start)),
            Item::Tag {
                tag: Tag::Delim, start, ..
            } => segments.push((start, Vec::new())),
            Item::Tag { tag: Tag::BoxClose, .. } => break,
            _ => return Err((Failure::at(group_start, DecodeReason::UnclosedBox), i)),
        }
        i += 1;
    }
    let after = i + 1;

    let vocab = grid.vocab_size() as u64;
    let mut pairs = Vec::with_capacity(segments.len());
    for (seg_start, locs) in &segments {
        if let Some(&(_, at)) = locs.iter().find(|(k, _)| *k >= vocab) {
            return Err((Failure::at(at, DecodeReason::TokenOutOfRange), after));
        }
        match locs.len() {
            0 => return Err((Failure::at(*seg_start, DecodeReason::EmptyBox), after)),
            2 => {}
            n if n % 2 == 1 => return Err((Failure::at(*seg_start, DecodeReason::OddLocationCount), after)),
            _ => return Err((Failure::at(*seg_start, DecodeReason::MissingDelimiter), after)),
        }
        let tl = LocToken(locs[0].0 as u32);
        let br = LocToken(locs[1].0 as u32);
        let (tr, tc) = cell_of_token(tl, grid);
        let (brr, brc) = cell_of_token(br, grid);
        if tr > brr || tc > brc {
            return Err((Failure::at(locs[0].1, DecodeReason::InvertedPair), after));
        }
        pairs.push(TokenBoxPair { tl, br });
    }
    Ok((pairs, after))
}

/// Strict parse of a markup string.
pub fn parse(text: &str, grid: GridSpec) -> Result<GroundedCaption, DecodeFailure> {
    parse_items(text, grid).map_err(|f| f.into_decode(text))
}

fn parse_items(s: &str, grid: GridSpec) -> Result<GroundedCaption, Failure> {
    let items = lex(s);
    let mut doc = GroundedCaption::new(String::new(), Vec::new());

    // Header: tags may be separated by whitespace; exactly one space after
    // the last header tag is a separator, the rest belongs to the caption.
    let mut i = 0;
    let mut header_end: Option<usize> = None;
    let next_tag = |i: usize| -> Option<(usize, Tag, usize, usize)> {
        let mut j = i;
        while let Some(Item::Text { start, end }) = items.get(j) {
            if !is_blank(s, *start, *end) {
                return None;
            }
            j += 1;
        }
        match items.get(j) {
            Some(Item::Tag { tag, start, end }) => Some((j, *tag, *start, *end)),
            _ => None,
        }
    };
    if let Some((j, Tag::Bos, _, end)) = next_tag(i) {
        doc.has_bos = true;
        i = j + 1;
        header_end = Some(end);
    }
    if let Some((j, Tag::Image, start, end)) = next_tag(i) {
        let Some(close) = s[end..].find("</image>") else {
            return Err(Failure::at(start, DecodeReason::UnclosedImage));
        };
        let close = end + close;
        doc.image_payload = Some(s[end..close].trim().to_string());
        let resume = close + "</image>".len();
        i = j + 1;
        while matches!(items.get(i), Some(Item::Tag { start, .. }) | Some(Item::Text { start, .. }) if *start < resume)
        {
            i += 1;
        }
        header_end = Some(resume);
    }
    if let Some((j, Tag::Grounding, _, end)) = next_tag(i) {
        doc.has_grounding_marker = true;
        i = j + 1;
        header_end = Some(end);
    }
    let mut skip_one_space = header_end.is_some();

    let mut caption = String::with_capacity(s.len());
    let mut n_chars = 0usize;
    while let Some(item) = items.get(i) {
        match *item {
            Item::Text { mut start, mut end } => {
                if skip_one_space && s[start..end].starts_with(' ') {
                    start += 1;
                }
                // the separator before </s> is not caption text
                let eos_next = matches!(items.get(i + 1), Some(Item::Tag { tag: Tag::Eos, .. }));
                if eos_next && s[start..end].ends_with(' ') {
                    end -= 1;
                }
                let piece = &s[start..end];
                caption.push_str(piece);
                n_chars += piece.chars().count();
                i += 1;
            }
            Item::Tag { tag, start, .. } => match tag {
                Tag::SpanOpen => {
                    let (link, next) = read_link(s, &items, i, grid, n_chars)?;
                    caption.push_str(&link.span.text);
                    n_chars = link.span.end;
                    doc.links.push(link);
                    i = next;
                }
                Tag::Eos => {
                    doc.has_eos = true;
                    if let Some(rest) = items.get(i + 1..) {
                        for it in rest {
                            match *it {
                                Item::Text { start, end } if is_blank(s, start, end) => {}
                                Item::Text { start, .. } => return Err(Failure::at(start, DecodeReason::TrailingText)),
                                Item::Tag {
                                    tag: Tag::Unknown,
                                    start,
                                    ..
                                } => return Err(Failure::at(start, DecodeReason::UnknownToken)),
                                Item::Tag { start, .. } => {
                                    return Err(Failure::at(start, DecodeReason::UnexpectedToken))
                                }
                            }
                        }
                    }
                    i = items.len();
                }
                Tag::BoxOpen => return Err(Failure::at(start, DecodeReason::BoxWithoutSpan)),
                Tag::Unknown => return Err(Failure::at(start, DecodeReason::UnknownToken)),
                _ => return Err(Failure::at(start, DecodeReason::UnexpectedToken)),
            },
        }
        skip_one_space = false;
    }
    doc.caption = caption;
    Ok(doc)
}

/// Reads `<p> text </p><box>..</box>` starting at `items[open]`.
fn read_link(
    s: &str,
    items: &[Item],
    open: usize,
    grid: GridSpec,
    caption_chars: usize,
) -> Result<(GroundLink, usize), Failure> {
    let Item::Tag { start: open_at, .. } = items[open] else {
        unreachable!("read_link called on text");
    };
    let mut i = open + 1;
    let mut text = "";
    if let Some(Item::Text { start, end }) = items.get(i) {
        text = trim_one(&s[*start..*end]);
        i += 1;
    }
    match items.get(i) {
        Some(Item::Tag {
            tag: Tag::SpanClose, ..
        }) => i += 1,
        Some(Item::Tag {
            tag: Tag::Unknown,
            start,
            ..
        }) => return Err(Failure::at(*start, DecodeReason::UnknownToken)),
        _ => return Err(Failure::at(open_at, DecodeReason::UnclosedSpan)),
    }
    if text.is_empty() {
        return Err(Failure::at(open_at, DecodeReason::EmptySpan));
    }
    while let Some(Item::Text { start, end }) = items.get(i) {
        if !is_blank(s, *start, *end) {
            break;
        }
        i += 1;
    }
    match items.get(i) {
        Some(Item::Tag { tag: Tag::BoxOpen, .. }) => {}
        _ => return Err(Failure::at(open_at, DecodeReason::SpanWithoutBox)),
    }
    let (boxes, next) = read_box_group(s, items, i, grid).map_err(|(f, _)| f)?;
    let len = text.chars().count();
    let link = GroundLink {
        span: TextSpan {
            start: caption_chars,
            end: caption_chars + len,
            text: text.to_string(),
        },
        boxes,
    };
    Ok((link, next))
}

/// Lenient scan of arbitrary text for box groups.
///
/// Every well-formed `<box>..</box>` group is returned in order of
/// appearance, with the `<p>..</p>` phrase directly before it when there is
/// one. Malformed groups are skipped and reported through the flag.
pub fn extract_links(text: &str, grid: GridSpec) -> (Vec<ExtractedLink>, bool) {
    let items = lex(text);
    let mut links = Vec::new();
    let mut failed = false;
    let mut pending: Option<String> = None;
    let mut i = 0;
    while i < items.len() {
        match items[i] {
            Item::Tag { tag: Tag::SpanOpen, .. } => {
                pending = None;
                let mut j = i + 1;
                let mut phrase = "";
                if let Some(Item::Text { start, end }) = items.get(j) {
                    phrase = trim_one(&text[*start..*end]);
                    j += 1;
                }
                if let Some(Item::Tag {
                    tag: Tag::SpanClose, ..
                }) = items.get(j)
                {
                    if !phrase.is_empty() {
                        pending = Some(phrase.to_string());
                    }
                    i = j + 1;
                } else {
                    i += 1;
                }
            }
            Item::Tag { tag: Tag::BoxOpen, .. } => match read_box_group(text, &items, i, grid) {
                Ok((boxes, next)) => {
                    links.push(ExtractedLink {
                        phrase: pending.take(),
                        boxes,
                    });
                    i = next;
                }
                Err((_, next)) => {
                    failed = true;
                    pending = None;
                    // resume at the offending item so a following <box> is seen
                    i = next.max(i + 1);
                }
            },
            Item::Text { start, end } if is_blank(text, start, end) => i += 1,
            _ => {
                pending = None;
                i += 1;
            }
        }
    }
    (links, failed)
}
