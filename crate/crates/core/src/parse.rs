//! Grammars for reading structured answers out of free model text.
//!
//! Every parser takes the first complete match in the text. Swapped box
//! corners are reordered rather than rejected.

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::record::{Box2D, Box3D, NamedPoint, ParsedOutput, Point2D, Sample, GRID_MAX};
use crate::templates::{ExpectedFormat, MarkerTokens};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no box found")]
    NoBox,
    #[error("no point found")]
    NoPoint,
    #[error("coordinate overflow")]
    CoordinateOverflow,
    #[error("no option matched")]
    NoMatch,
    #[error("ambiguous")]
    Ambiguous,
    #[error("no options")]
    NoOptions,
}

impl From<ParseError> for ParsedOutput {
    fn from(e: ParseError) -> Self {
        ParsedOutput::ParseFailed(e.to_string())
    }
}

/// Byte cursor for the small bracket grammars.
struct Cursor<'a> {
    s: &'a [u8],
    pos: usize,
}

#[derive(Debug)]
enum Scan {
    NoMatch,
    Overflow,
}

impl<'a> Cursor<'a> {
    fn new(s: &'a str, pos: usize) -> Self {
        Cursor { s: s.as_bytes(), pos }
    }

    fn ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, b: u8) -> Result<(), Scan> {
        self.ws();
        if self.s.get(self.pos) == Some(&b) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Scan::NoMatch)
        }
    }

    fn eat_str(&mut self, lit: &str) -> Result<(), Scan> {
        self.ws();
        if self.s[self.pos..].starts_with(lit.as_bytes()) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(Scan::NoMatch)
        }
    }

    fn digits(&mut self) -> &'a [u8] {
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        &self.s[start..self.pos]
    }

    fn uint(&mut self) -> Result<u64, Scan> {
        self.ws();
        let d = self.digits();
        if d.is_empty() {
            return Err(Scan::NoMatch);
        }
        // Digits are ASCII so this is valid UTF-8.
        std::str::from_utf8(d).expect("ascii digits").parse::<u64>().map_err(|_| Scan::Overflow)
    }

    /// Non-negative decimal: `12`, `12.`, `12.5`, `.5`.
    fn decimal(&mut self) -> Result<f64, Scan> {
        self.ws();
        let start = self.pos;
        let int = self.digits().len();
        let mut frac = 0;
        if self.s.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            frac = self.digits().len();
        }
        if int == 0 && frac == 0 {
            self.pos = start;
            return Err(Scan::NoMatch);
        }
        std::str::from_utf8(&self.s[start..self.pos]).expect("ascii number").parse::<f64>().map_err(|_| Scan::NoMatch)
    }

    fn tuple<const N: usize>(&mut self) -> Result<[u64; N], Scan> {
        self.eat(b'(')?;
        let mut out = [0u64; N];
        for (i, slot) in out.iter_mut().enumerate() {
            if i > 0 {
                self.eat(b',')?;
            }
            *slot = self.uint()?;
        }
        self.eat(b')')?;
        Ok(out)
    }
}

/// Byte offsets where `needle` occurs in `hay`, in order.
fn occurrences<'a>(hay: &'a str, needle: &'a str) -> impl Iterator<Item = usize> + 'a {
    hay.match_indices(needle).map(|(i, _)| i)
}

fn scan_box2d(text: &str, start: usize, open: &str, close: &str) -> Result<[u64; 4], Scan> {
    let mut c = Cursor::new(text, start);
    c.eat_str(open)?;
    let a = c.tuple::<2>()?;
    c.eat(b',')?;
    let b = c.tuple::<2>()?;
    c.eat_str(close)?;
    Ok([a[0], a[1], b[0], b[1]])
}

pub fn parse_box2d(text: &str) -> Result<Box2D, ParseError> {
    parse_box2d_with(text, &MarkerTokens::default())
}

/// First well-formed `<box_start>(x1,y1),(x2,y2)<box_end>` in `text`,
/// accepting any configured marker spelling.
pub fn parse_box2d_with(text: &str, markers: &MarkerTokens) -> Result<Box2D, ParseError> {
    let pairs = markers.box_pairs();
    let mut starts: Vec<(usize, &str, &str)> = Vec::new();
    for (open, close) in &pairs {
        starts.extend(occurrences(text, open).map(|i| (i, *open, *close)));
    }
    // Earliest position first; on ties prefer the longer opening marker.
    starts.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.len().cmp(&a.1.len())));

    for (pos, open, close) in starts {
        match scan_box2d(text, pos, open, close) {
            Ok(v) => {
                if v.iter().any(|&c| c > u64::from(GRID_MAX)) {
                    return Err(ParseError::CoordinateOverflow);
                }
                let v = v.map(|c| c as u32);
                return Ok(Box2D::from_corners((v[0], v[1]), (v[2], v[3])));
            }
            Err(Scan::Overflow) => return Err(ParseError::CoordinateOverflow),
            Err(Scan::NoMatch) => continue,
        }
    }
    Err(ParseError::NoBox)
}

/// First well-formed `[(x1,y1,z1),(x2,y2,z2)]` in `text`.
pub fn parse_box3d(text: &str) -> Result<Box3D, ParseError> {
    for pos in occurrences(text, "[") {
        let mut c = Cursor::new(text, pos);
        let scanned = (|| {
            c.eat(b'[')?;
            let a = c.tuple::<3>()?;
            c.eat(b',')?;
            let b = c.tuple::<3>()?;
            c.eat(b']')?;
            Ok::<_, Scan>((a, b))
        })();
        match scanned {
            Ok((a, b)) => {
                let conv = |v: [u64; 3]| -> Result<(u32, u32, u32), ParseError> {
                    let f = |x: u64| u32::try_from(x).map_err(|_| ParseError::CoordinateOverflow);
                    Ok((f(v[0])?, f(v[1])?, f(v[2])?))
                };
                return Ok(Box3D::from_corners(conv(a)?, conv(b)?));
            }
            Err(Scan::Overflow) => return Err(ParseError::CoordinateOverflow),
            Err(Scan::NoMatch) => continue,
        }
    }
    Err(ParseError::NoBox)
}

/// First `[x,y]` pair of non-negative decimals in `text`.
pub fn parse_point(text: &str) -> Result<Point2D, ParseError> {
    for pos in occurrences(text, "[") {
        let mut c = Cursor::new(text, pos);
        let scanned = (|| {
            c.eat(b'[')?;
            let x = c.decimal()?;
            c.eat(b',')?;
            let y = c.decimal()?;
            c.eat(b']')?;
            Ok::<_, Scan>((x, y))
        })();
        if let Ok((x, y)) = scanned {
            if x.is_finite() && y.is_finite() {
                return Ok(Point2D::new(x, y));
            }
        }
    }
    Err(ParseError::NoPoint)
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // hiragana, katakana
        | 0x3400..=0x4DBF    // CJK ext A
        | 0x4E00..=0x9FFF    // CJK unified
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2FA1F) // CJK ext B+ and compatibility supplement
}

fn is_stripped_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x3000..=0x303F      // CJK symbols and punctuation
            | 0xFF01..=0xFF0F    // full-width ! through /
            | 0xFF1A..=0xFF20    // full-width : through @
            | 0xFF3B..=0xFF40    // full-width [ through `
            | 0xFF5B..=0xFF65    // full-width { through halfwidth middle dot
            | 0x2018..=0x201F    // curly quotes
            | 0x2026) // ellipsis
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Canonical answer text used for exact matching and metric tokenization.
///
/// NFKC fold, lowercase, punctuation to spaces, whitespace collapse, and
/// removal of standalone English articles.
pub fn normalize_answer(text: &str) -> String {
    let folded: String = text.nfkc().collect();
    let lowered = folded.to_lowercase();
    let spaced: String = lowered.chars().map(|c| if is_stripped_punct(c) { ' ' } else { c }).collect();
    spaced.split_whitespace().filter(|t| !ARTICLES.contains(t)).collect::<Vec<_>>().join(" ")
}

/// Metric tokens: normalized words, with CJK characters split one per token.
pub fn answer_tokens(text: &str) -> Vec<String> {
    let norm = normalize_answer(text);
    let mut out = Vec::new();
    for word in norm.split(' ').filter(|w| !w.is_empty()) {
        let mut run = String::new();
        for c in word.chars() {
            if is_cjk(c) {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                out.push(c.to_string());
            } else {
                run.push(c);
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Maps an answer onto an option index.
///
/// Normalized exact equality is tried first, then whole-token containment.
/// More than one option matching at the same level is ambiguous.
pub fn parse_choice(text: &str, options: &[String]) -> Result<usize, ParseError> {
    if options.is_empty() {
        return Err(ParseError::NoOptions);
    }
    let norm = normalize_answer(text);
    let exact: Vec<usize> =
        options.iter().enumerate().filter(|(_, o)| normalize_answer(o) == norm).map(|(i, _)| i).collect();
    match exact.len() {
        1 => return Ok(exact[0]),
        n if n > 1 => return Err(ParseError::Ambiguous),
        _ => {}
    }

    let text_tokens = answer_tokens(text);
    let contained: Vec<usize> = options
        .iter()
        .enumerate()
        .filter(|(_, o)| contains_run(&text_tokens, &answer_tokens(o)))
        .map(|(i, _)| i)
        .collect();
    match contained.len() {
        1 => Ok(contained[0]),
        0 => Err(ParseError::NoMatch),
        _ => Err(ParseError::Ambiguous),
    }
}

/// Parses raw model text under the grammar `format` demands for `sample`.
pub fn parse_output(raw: &str, format: ExpectedFormat, sample: &Sample, markers: &MarkerTokens) -> ParsedOutput {
    match format {
        ExpectedFormat::FreeText => ParsedOutput::Text(raw.trim().to_string()),
        ExpectedFormat::OptionChoice => match parse_choice(raw, sample.options()) {
            Ok(i) => ParsedOutput::Choice(i),
            Err(e) => e.into(),
        },
        ExpectedFormat::BoxToken2D => match parse_box2d_with(raw, markers) {
            Ok(b) => ParsedOutput::Box2D(b),
            Err(e) => e.into(),
        },
        ExpectedFormat::BracketBox3D => match parse_box3d(raw) {
            Ok(b) => ParsedOutput::Box3D(b),
            Err(e) => e.into(),
        },
        ExpectedFormat::BracketPoint => match parse_point(raw) {
            Ok(p) => {
                let name = match &sample.ground_truth {
                    crate::record::GroundTruth::Points(pts) if !pts.is_empty() => pts[0].name.clone(),
                    _ => sample.question.clone(),
                };
                ParsedOutput::Points(vec![NamedPoint { name, point: p }])
            }
            Err(e) => e.into(),
        },
    }
}

/// [`parse_output`] with the format derived from the sample's task.
pub fn parse_for_sample(raw: &str, sample: &Sample, markers: &MarkerTokens) -> ParsedOutput {
    parse_output(raw, ExpectedFormat::for_task(sample.task), sample, markers)
}
