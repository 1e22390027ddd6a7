//! Question/answer template bank and value rendering.
//!
//! The built-in bank carries the template tables verbatim; a user bank can
//! be loaded from a tab-separated text file instead. Each level holds two
//! template families: `value` templates ask for and state a quantity,
//! `predicate` templates ask a yes/no placement question answered from the
//! true/false response cells.
//!
//! Depth rendering follows two fixed rules: values strictly below half a
//! meter render on the centimeter scale with one decimal, everything else
//! renders in meters rounded to three decimals, half-up.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("no templates for cell ({level}, {family}, {kind})")]
    EmptyCell { level: QaLevel, family: QaFamily, kind: QaKind },
    #[error("no binding supplied for slot {0}")]
    MissingBinding(Slot),
    #[error("cannot render non-positive or non-finite depth {0}")]
    BadDepth(f64),
    #[error("cannot render negative or non-finite length {0}")]
    BadLength(f64),
    #[error("bank file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("failed to read bank file {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaLevel {
    Pixel,
    Object,
    Scene,
}

impl fmt::Display for QaLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QaLevel::Pixel => "pixel",
            QaLevel::Object => "object",
            QaLevel::Scene => "scene",
        })
    }
}

/// Distinguishes the two template families each level provides: quantity
/// questions with value answers, and placement questions with polar
/// responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaFamily {
    Value,
    Predicate,
}

impl fmt::Display for QaFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QaFamily::Value => "value",
            QaFamily::Predicate => "predicate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaKind {
    Question,
    Answer,
    TrueResponse,
    FalseResponse,
}

impl fmt::Display for QaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QaKind::Question => "question",
            QaKind::Answer => "answer",
            QaKind::TrueResponse => "true_response",
            QaKind::FalseResponse => "false_response",
        })
    }
}

/// A bracketed slot a template may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
    X,
    Y,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::A, Slot::B, Slot::X, Slot::Y];

    /// The literal token substituted in template text.
    pub fn token(self) -> &'static str {
        match self {
            Slot::A => "[A]",
            Slot::B => "[B]",
            Slot::X => "[X]",
            Slot::Y => "[Y]",
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// One surface form with its slot inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub level: QaLevel,
    pub family: QaFamily,
    pub kind: QaKind,
    pub slots: Vec<Slot>,
    pub text: String,
}

impl Template {
    fn new(level: QaLevel, family: QaFamily, kind: QaKind, text: &str) -> Self {
        let slots = scan_slots(text);
        Self { level, family, kind, slots, text: text.to_string() }
    }

    pub fn has_slot(&self, slot: Slot) -> bool {
        self.slots.contains(&slot)
    }
}

/// Slots in order of first occurrence in the text.
fn scan_slots(text: &str) -> Vec<Slot> {
    let mut found: Vec<(usize, Slot)> = Slot::ALL
        .iter()
        .filter_map(|&s| text.find(s.token()).map(|pos| (pos, s)))
        .collect();
    found.sort_by_key(|&(pos, _)| pos);
    found.into_iter().map(|(_, s)| s).collect()
}

// Built-in surface forms, one table per (level, family, kind) cell.

const PIXEL_VALUE_QUESTIONS: &[&str] = &[
    "What is the depth value at pixel point [A]?",
    "How far away is point [A]?",
    "Tell me the depth of point [A].",
];

const PIXEL_VALUE_ANSWERS: &[&str] = &[
    "[X] away.",
    "It is [X].",
    "Depth value of point [A] is [X].",
];

const PIXEL_PREDICATE_QUESTIONS: &[&str] = &[
    "Which point is close to a viewer? Point: [A], Point: [B].",
    "Is point [A] closer than [B]?",
    "Which point has a smaller depth value? Point [A] or Point [B]?",
    "Compare the depth of point [A] and point [B].",
];

const PIXEL_TRUE_RESPONSES: &[&str] = &[
    "Yes, point [A] is closer to the viewer than point [B].",
    "Indeed, point [A] has a smaller depth value than point [B].",
    "Correct, point [A] is closer than point [B].",
];

const PIXEL_FALSE_RESPONSES: &[&str] = &[
    "No, point [A] is not closer than point [B].",
    "In fact, point [B] is closer to the viewer than point [A].",
    "Incorrect, point [B] has a smaller depth value than point [A].",
];

const OBJECT_VALUE_QUESTIONS: &[&str] = &[
    "Identify [A] and [B]",
    "What is the center of the 3d bounding box coordinate for [A]?",
];

const OBJECT_VALUE_ANSWERS: &[&str] = &[
    "[X]",
    "Center: [X]",
    "[A] in [X] and [B] in [Y]",
];

const OBJECT_PREDICATE_QUESTIONS: &[&str] = &[
    "Is the [A] to the left of the [B] from the viewer's perspective?",
    "Does the [A] appear on the left side of the [B]?",
    "Can you confirm if the [A] is positioned to the left of the [B]?",
];

const OBJECT_TRUE_RESPONSES: &[&str] = &[
    "Yes, the [A] is to the left of the [B].",
    "Indeed, the [A] is positioned on the left side of the [B].",
    "Correct, you'll find the [A] to the left of the [B].",
];

const OBJECT_FALSE_RESPONSES: &[&str] = &[
    "No, the [A] is not to the left of the [B].",
    "In fact, the [A] is either to the right of or directly aligned with the [B].",
    "Incorrect, the [A] is not on the left side of the [B].",
];

const SCENE_VALUE_QUESTIONS: &[&str] = &[
    "What is the distance between the [A] and the [B]?",
    "How far is the [A] from the [B]?",
    "How distant is the [A] from the [B]?",
    "Measure the distance from the [A] to the [B].",
];

const SCENE_VALUE_ANSWERS: &[&str] = &[
    "[X]",
    "the [A] and the [B] are [X] apart.",
    "They are [X] apart.",
    "The distance of the [A] from the [B] is [X].",
];

type CellKey = (QaLevel, QaFamily, QaKind);

/// Immutable template store keyed by (level, family, kind).
#[derive(Debug, Clone)]
pub struct TemplateBank {
    cells: BTreeMap<CellKey, Vec<Template>>,
}

impl TemplateBank {
    /// The compiled-in bank.
    pub fn builtin() -> Self {
        let mut cells = BTreeMap::new();
        let mut put = |level, family, kind, texts: &[&str]| {
            let templates =
                texts.iter().map(|t| Template::new(level, family, kind, t)).collect();
            cells.insert((level, family, kind), templates);
        };
        use QaFamily::{Predicate, Value};
        use QaKind::{Answer, FalseResponse, Question, TrueResponse};
        use QaLevel::{Object, Pixel, Scene};

        put(Pixel, Value, Question, PIXEL_VALUE_QUESTIONS);
        put(Pixel, Value, Answer, PIXEL_VALUE_ANSWERS);
        put(Pixel, Predicate, Question, PIXEL_PREDICATE_QUESTIONS);
        put(Pixel, Predicate, TrueResponse, PIXEL_TRUE_RESPONSES);
        put(Pixel, Predicate, FalseResponse, PIXEL_FALSE_RESPONSES);

        put(Object, Value, Question, OBJECT_VALUE_QUESTIONS);
        put(Object, Value, Answer, OBJECT_VALUE_ANSWERS);
        put(Object, Predicate, Question, OBJECT_PREDICATE_QUESTIONS);
        put(Object, Predicate, TrueResponse, OBJECT_TRUE_RESPONSES);
        put(Object, Predicate, FalseResponse, OBJECT_FALSE_RESPONSES);

        put(Scene, Value, Question, SCENE_VALUE_QUESTIONS);
        put(Scene, Value, Answer, SCENE_VALUE_ANSWERS);

        Self { cells }
    }

    /// Loads a bank from tab-separated records `level\tfamily\tkind\ttext`.
    /// Blank lines and lines starting with '#' are skipped. The loaded
    /// bank fully replaces the built-in one.
    pub fn from_text(content: &str) -> Result<Self, BankError> {
        let mut cells: BTreeMap<CellKey, Vec<Template>> = BTreeMap::new();
        for (i, raw) in content.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(4, '\t');
            let (level, family, kind, text) = match (
                parts.next(),
                parts.next(),
                parts.next(),
                parts.next(),
            ) {
                (Some(l), Some(f), Some(k), Some(t)) => (l, f, k, t),
                _ => {
                    return Err(BankError::Parse {
                        line: line_no,
                        reason: "expected 4 tab-separated fields".into(),
                    })
                }
            };
            let level = parse_level(level).ok_or_else(|| BankError::Parse {
                line: line_no,
                reason: format!("unknown level '{level}'"),
            })?;
            let family = parse_family(family).ok_or_else(|| BankError::Parse {
                line: line_no,
                reason: format!("unknown family '{family}'"),
            })?;
            let kind = parse_kind(kind).ok_or_else(|| BankError::Parse {
                line: line_no,
                reason: format!("unknown kind '{kind}'"),
            })?;
            if text.is_empty() {
                return Err(BankError::Parse { line: line_no, reason: "empty template text".into() });
            }
            cells
                .entry((level, family, kind))
                .or_default()
                .push(Template::new(level, family, kind, text));
        }
        Ok(Self { cells })
    }

    pub fn from_path(path: &Path) -> Result<Self, BankError> {
        let content = std::fs::read_to_string(path).map_err(|source| BankError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&content)
    }

    pub fn cell(&self, level: QaLevel, family: QaFamily, kind: QaKind) -> &[Template] {
        self.cells.get(&(level, family, kind)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Uniform deterministic template choice for a cell; the same seed
    /// always yields the same template.
    pub fn sample_template(
        &self,
        level: QaLevel,
        family: QaFamily,
        kind: QaKind,
        seed: u64,
    ) -> Result<&Template, BankError> {
        let cell = self.cell(level, family, kind);
        if cell.is_empty() {
            return Err(BankError::EmptyCell { level, family, kind });
        }
        let idx = SeededRng::new(seed).next_index(cell.len());
        Ok(&cell[idx])
    }

    /// Templates of a cell filtered to a slot condition, preserving order.
    pub fn cell_filtered(
        &self,
        level: QaLevel,
        family: QaFamily,
        kind: QaKind,
        keep: impl Fn(&Template) -> bool,
    ) -> Vec<&Template> {
        self.cell(level, family, kind).iter().filter(|t| keep(t)).collect()
    }

    /// Iterates all cells in key order; used by the golden-bank check.
    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.cells.values().flatten()
    }
}

fn parse_level(s: &str) -> Option<QaLevel> {
    match s {
        "pixel" => Some(QaLevel::Pixel),
        "object" => Some(QaLevel::Object),
        "scene" => Some(QaLevel::Scene),
        _ => None,
    }
}

fn parse_family(s: &str) -> Option<QaFamily> {
    match s {
        "value" => Some(QaFamily::Value),
        "predicate" => Some(QaFamily::Predicate),
        _ => None,
    }
}

fn parse_kind(s: &str) -> Option<QaKind> {
    match s {
        "question" => Some(QaKind::Question),
        "answer" => Some(QaKind::Answer),
        "true_response" => Some(QaKind::TrueResponse),
        "false_response" => Some(QaKind::FalseResponse),
        _ => None,
    }
}

/// Replaces every slot occurrence in `t` with its binding. Extra bindings
/// are ignored; a missing binding is an error naming the slot.
pub fn instantiate(t: &Template, bindings: &BTreeMap<Slot, String>) -> Result<String, BankError> {
    let mut out = t.text.clone();
    for &slot in &t.slots {
        let value = bindings.get(&slot).ok_or(BankError::MissingBinding(slot))?;
        out = out.replace(slot.token(), value);
    }
    debug_assert!(
        Slot::ALL.iter().all(|s| !out.contains(s.token())),
        "slot token survived instantiation: {out}"
    );
    Ok(out)
}

/// A rendered quantity together with the exact value it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedValue {
    pub text: String,
    pub raw_meters: f64,
}

/// Renders a strictly positive depth value; see [`render_length`] for the
/// scale rules.
pub fn render_depth(meters: f64) -> Result<RenderedValue, BankError> {
    if !(meters > 0.0 && meters.is_finite()) {
        return Err(BankError::BadDepth(meters));
    }
    render_length(meters)
}

/// Renders a nonnegative length: below 0.5 m on the centimeter scale with
/// one decimal, otherwise in meters with three decimals (half-up, trailing
/// zeros trimmed down to one decimal place).
pub fn render_length(meters: f64) -> Result<RenderedValue, BankError> {
    if !(meters >= 0.0 && meters.is_finite()) {
        return Err(BankError::BadLength(meters));
    }
    let text = if meters < 0.5 {
        let tenths = (meters * 100.0 * 10.0).round() as i64;
        format!("{}.{} centimeters", tenths / 10, tenths % 10)
    } else {
        format!("{} meters", format_meters_3(meters))
    };
    Ok(RenderedValue { text, raw_meters: meters })
}

/// Half-up rounding to three decimals, then trailing-zero trimming with at
/// least one decimal kept ("2.000" becomes "2.0", "1.235" stays).
fn format_meters_3(meters: f64) -> String {
    let scaled = (meters * 1000.0).round() as i64;
    let mut s = format!("{}.{:03}", scaled / 1000, scaled % 1000);
    while s.ends_with('0') && !s.ends_with(".0") {
        s.pop();
    }
    s
}

/// Fixed three-decimal signed coordinate, half away from zero.
pub fn format_coordinate(value: f64) -> String {
    let scaled = (value * 1000.0).round() as i64;
    let sign = if scaled < 0 { "-" } else { "" };
    let abs = scaled.unsigned_abs();
    format!("{sign}{}.{:03}", abs / 1000, abs % 1000)
}

/// Parses text produced by [`render_length`] back to meters; test support
/// for the round-trip bound.
pub fn parse_rendered(text: &str) -> Option<f64> {
    if let Some(v) = text.strip_suffix(" centimeters") {
        return v.parse::<f64>().ok().map(|cm| cm / 100.0);
    }
    if let Some(v) = text.strip_suffix(" meters") {
        return v.parse::<f64>().ok();
    }
    None
}
