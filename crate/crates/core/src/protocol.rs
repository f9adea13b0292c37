//! Prompt rendering and output parsing for the parser, the teacher model and
//! the clarification model.
//!
//! Three prompt families share one dialogue rendering, `uI, speaker: text`
//! joined by ` | `:
//!
//! * parser prompt: dialogue plus a request for the dependency of the last turn,
//!   answered as `uC, uP : relation` or `none`;
//! * teacher prompt: two-step reasoning request answered with a JSON object
//!   holding `Step 1 Reasoning`, `Step 2 Reasoning` and `Clarified utterance`;
//! * clarification prompt: dialogue behind `Please clarify the last utterance:`,
//!   answered with labeled `CTR:` / `DGR:` / `CLARIFIED:` sections.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{GoldRelation, RelationType, Utterance};

const SEPARATOR: &str = " | ";
const SEPARATOR_ESCAPED: &str = " ¦ ";

/// Linguistic features the teacher is asked to look for.
pub const CLARIFICATION_TYPES: [&str; 5] = ["omission", "typo", "abbreviation", "slang", "idiom"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("no JSON object found in teacher output")]
    NoObject,
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("missing section label {0:?}")]
    MissingSection(&'static str),
    #[error("clarified utterance is empty")]
    EmptyClarification,
    #[error("invalid teacher request: {0}")]
    InvalidRequest(String),
    #[error("invalid parse output {0:?}")]
    InvalidOutput(String),
}

/// A parser answer: either an arc from the current turn, or no arc.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ParseOutput {
    NoLink,
    Link {
        child: usize,
        parent: usize,
        rel: RelationType,
    },
}

impl ParseOutput {
    pub fn link(child: usize, parent: usize, rel: RelationType) -> Result<Self, ProtocolError> {
        if parent == 0 || parent >= child {
            return Err(ProtocolError::InvalidOutput(format!("u{child}, u{parent} : {rel}")));
        }
        Ok(ParseOutput::Link { child, parent, rel })
    }

    pub fn parent(&self) -> Option<usize> {
        match self {
            ParseOutput::NoLink => None,
            ParseOutput::Link { parent, .. } => Some(*parent),
        }
    }

    pub fn rel(&self) -> Option<RelationType> {
        match self {
            ParseOutput::NoLink => None,
            ParseOutput::Link { rel, .. } => Some(*rel),
        }
    }

    /// Whether this output is exactly the gold answer (no arc matches `None`).
    pub fn matches(&self, gold: Option<GoldRelation>) -> bool {
        *self == ParseOutput::from(gold)
    }
}

impl From<GoldRelation> for ParseOutput {
    fn from(g: GoldRelation) -> Self {
        ParseOutput::Link {
            child: g.child,
            parent: g.parent,
            rel: g.rel,
        }
    }
}

impl From<Option<GoldRelation>> for ParseOutput {
    fn from(g: Option<GoldRelation>) -> Self {
        g.map_or(ParseOutput::NoLink, ParseOutput::from)
    }
}

impl fmt::Display for ParseOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_parse_output(*self))
    }
}

impl FromStr for ParseOutput {
    type Err = ProtocolError;

    /// Parses without an expected child index.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_any(s).ok_or_else(|| ProtocolError::InvalidOutput(s.to_string()))
    }
}

impl TryFrom<String> for ParseOutput {
    type Error = ProtocolError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<ParseOutput> for String {
    fn from(p: ParseOutput) -> Self {
        format_parse_output(p)
    }
}

/// Result of reading one parser completion. `Invalid` is an ordinary value
/// so that voting can count it as an abstention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Prediction {
    Valid(ParseOutput),
    Invalid,
}

impl Prediction {
    /// Invalid predictions are scored as no arc.
    pub fn or_no_link(self) -> ParseOutput {
        match self {
            Prediction::Valid(p) => p,
            Prediction::Invalid => ParseOutput::NoLink,
        }
    }
}

pub fn format_parse_output(out: ParseOutput) -> String {
    match out {
        ParseOutput::NoLink => "none".to_string(),
        ParseOutput::Link { child, parent, rel } => format!("u{child}, u{parent} : {rel}"),
    }
}

static OUTPUT_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*u\s*(\d+)\s*,\s*u\s*(\d+)\s*:\s*([a-z][a-z_\- ]*?)\s*\.?\s*$").unwrap()
});
static NONE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^\s*none\s*\.?\s*$").unwrap());

fn parse_any(text: &str) -> Option<ParseOutput> {
    if NONE_RE.is_match(text) {
        return Some(ParseOutput::NoLink);
    }
    let caps = OUTPUT_RE.captures(text)?;
    let child = caps[1].parse().ok()?;
    let parent = caps[2].parse().ok()?;
    let rel = caps[3].parse().ok()?;
    ParseOutput::link(child, parent, rel).ok()
}

/// Reads a parser completion for turn `k`. Anything that is not a well-formed
/// answer about turn `k` is `Invalid`.
pub fn parse_parse_output(text: &str, k: usize) -> Prediction {
    match parse_any(text) {
        Some(ParseOutput::Link { child, .. }) if child != k => Prediction::Invalid,
        Some(p) => Prediction::Valid(p),
        None => Prediction::Invalid,
    }
}

fn escape(text: &str) -> String {
    text.replace(SEPARATOR, SEPARATOR_ESCAPED)
}

/// `u1, a: ... | u2, b: ...` with original turn indices.
pub fn render_dialogue(context: &[Utterance]) -> String {
    context
        .iter()
        .map(|u| format!("u{}, {}: {}", u.index, escape(&u.speaker), escape(&u.text)))
        .collect::<Vec<_>>()
        .join(SEPARATOR)
}

fn current_index(context: &[Utterance]) -> usize {
    context.last().map_or(0, |u| u.index)
}

/// Parser input; the last turn of `context` is the one being attached.
pub fn render_dp_prompt(context: &[Utterance]) -> String {
    format!(
        "Below is a multi-party dialogue:\n\n{}\n\nPlease identify a dependency utterance for utterance u{} and determine the rhetorical relationship between them.",
        render_dialogue(context),
        current_index(context)
    )
}

/// Clarification-model input.
pub fn render_dcm_prompt(context: &[Utterance]) -> String {
    format!("Please clarify the last utterance:\n\n{}", render_dialogue(context))
}

/// Reasoning traces plus the clarified utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClarificationRecord {
    pub ctr: String,
    pub dgr: String,
    pub clarified: String,
}

impl ClarificationRecord {
    pub fn new(ctr: impl Into<String>, dgr: impl Into<String>, clarified: impl Into<String>) -> Result<Self, ProtocolError> {
        let clarified = clarified.into();
        if clarified.trim().is_empty() {
            return Err(ProtocolError::EmptyClarification);
        }
        Ok(ClarificationRecord {
            ctr: ctr.into(),
            dgr: dgr.into(),
            clarified,
        })
    }
}

/// Inputs of the teacher prompt.
#[derive(Clone, Debug)]
pub struct TeacherRequest<'a> {
    context: &'a [Utterance],
    intended: GoldRelation,
    ambiguous: ParseOutput,
    types: Vec<String>,
}

impl<'a> TeacherRequest<'a> {
    pub fn new(context: &'a [Utterance], intended: GoldRelation, ambiguous: ParseOutput) -> Result<Self, ProtocolError> {
        let k = current_index(context);
        if context.is_empty() {
            return Err(ProtocolError::InvalidRequest("empty context".into()));
        }
        if intended.child != k {
            return Err(ProtocolError::InvalidRequest(format!(
                "intended child u{} is not the current turn u{k}",
                intended.child
            )));
        }
        if ambiguous == ParseOutput::from(intended) {
            return Err(ProtocolError::InvalidRequest("ambiguous relation equals the intended one".into()));
        }
        if let ParseOutput::Link { child, .. } = ambiguous {
            if child != k {
                return Err(ProtocolError::InvalidRequest(format!(
                    "ambiguous child u{child} is not the current turn u{k}"
                )));
            }
        }
        Ok(TeacherRequest {
            context,
            intended,
            ambiguous,
            types: CLARIFICATION_TYPES.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.intended.child
    }
}

fn type_list(types: &[String]) -> String {
    let n = types.len();
    let items: Vec<String> = types
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i + 1 == n && n > 1 {
                format!("or \"{t}.\"")
            } else if i + 1 == n {
                format!("\"{t}.\"")
            } else {
                format!("\"{t},\"")
            }
        })
        .collect();
    format!("{{{}}}", items.join(" "))
}

fn ambiguous_phrase(k: usize, ambiguous: ParseOutput) -> String {
    match ambiguous {
        ParseOutput::Link { parent, rel, .. } => {
            format!("avoid the {} between utterance u{k} and utterance u{parent}.", rel.phrase())
        }
        ParseOutput::NoLink => format!("avoid leaving utterance u{k} without a dependent utterance."),
    }
}

pub fn render_teacher_prompt(req: &TeacherRequest<'_>) -> String {
    let k = req.k();
    let intended = format!(
        "the {} relation type between utterance u{k} and utterance u{} is clear",
        req.intended.rel.phrase(),
        req.intended.parent
    );
    format!(
        "Below is a multi-party conversation:\n\n\
         {dialogue}\n\n\
         Let's break this down step by step.\n\n\
         # Step 1: Evaluate whether u{k} contains any {types}\n\n\
         # Step 2: Follow the results of step 1 as a clarification direction and provide a clarified version of utterance u{k} to ensure that {intended} and {avoid}\n\n\
         Output Format:\n\
         {{\n\
         \"Step 1 Reasoning\": \"\",\n\
         \"Step 2 Reasoning\": \"\",\n\
         \"Clarified utterance\": \"\"\n\
         }}\n\
         Where:\n\
         Step 1 Reasoning is the reasoning process for Step 1.\n\
         Step 2 Reasoning is the reasoning process for Step 2.\n\
         Clarified utterance is the clarified version of utterance u{k}.",
        dialogue = render_dialogue(req.context),
        types = type_list(&req.types),
        avoid = ambiguous_phrase(k, req.ambiguous),
    )
}

fn normalize_key(key: &str) -> String {
    key.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn field(obj: &serde_json::Map<String, Value>, name: &'static str) -> Result<String, ProtocolError> {
    let want = normalize_key(name);
    obj.iter()
        .find(|(k, _)| normalize_key(k) == want)
        .and_then(|(_, v)| v.as_str())
        .map(str::to_string)
        .ok_or(ProtocolError::MissingField(name))
}

/// Extracts the three teacher fields from the first JSON object in `text`,
/// ignoring code fences and surrounding prose.
pub fn parse_teacher_output(text: &str) -> Result<ClarificationRecord, ProtocolError> {
    let obj = text
        .char_indices()
        .filter(|&(_, c)| c == '{')
        .find_map(|(i, _)| {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(Value::Object(map))) => Some(map),
                _ => None,
            }
        })
        .ok_or(ProtocolError::NoObject)?;
    let ctr = field(&obj, "Step 1 Reasoning")?;
    let dgr = field(&obj, "Step 2 Reasoning")?;
    let clarified = field(&obj, "Clarified utterance")?;
    ClarificationRecord::new(ctr, dgr, clarified.trim())
}

const CTR_LABEL: &str = "CTR:";
const DGR_LABEL: &str = "DGR:";
const CLARIFIED_LABEL: &str = "CLARIFIED:";

/// Training target for the clarification model.
pub fn format_dcm_target(rec: &ClarificationRecord) -> String {
    format!(
        "{CTR_LABEL} {}\n{DGR_LABEL} {}\n{CLARIFIED_LABEL} {}",
        rec.ctr, rec.dgr, rec.clarified
    )
}

fn find_label(text: &str, from: usize, label: &'static str) -> Result<usize, ProtocolError> {
    let mut pos = from;
    while let Some(off) = text[pos..].find(label) {
        let at = pos + off;
        if at == 0 || text.as_bytes()[at - 1] == b'\n' {
            return Ok(at);
        }
        pos = at + label.len();
    }
    Err(ProtocolError::MissingSection(label))
}

fn section_body(raw: &str) -> String {
    raw.strip_prefix(' ').unwrap_or(raw).to_string()
}

/// Inverse of [`format_dcm_target`]. Sections begin at labels placed at the
/// start of a line; text before the first label is ignored.
pub fn parse_dcm_output(text: &str) -> Result<ClarificationRecord, ProtocolError> {
    let ctr_at = find_label(text, 0, CTR_LABEL)?;
    let dgr_at = find_label(text, ctr_at + CTR_LABEL.len(), DGR_LABEL)?;
    let cl_at = find_label(text, dgr_at + DGR_LABEL.len(), CLARIFIED_LABEL)?;
    let ctr = &text[ctr_at + CTR_LABEL.len()..dgr_at - 1];
    let dgr = &text[dgr_at + DGR_LABEL.len()..cl_at - 1];
    let clarified = &text[cl_at + CLARIFIED_LABEL.len()..];
    ClarificationRecord::new(section_body(ctr), section_body(dgr), section_body(clarified))
}

/// Copy of `context` whose last turn text is replaced by `clarified`.
pub fn substitute_clarification(context: &[Utterance], clarified: &str) -> Result<Vec<Utterance>, ProtocolError> {
    if clarified.trim().is_empty() {
        return Err(ProtocolError::EmptyClarification);
    }
    let mut out = context.to_vec();
    match out.last_mut() {
        Some(last) => last.text = clarified.to_string(),
        None => return Err(ProtocolError::InvalidRequest("empty context".into())),
    }
    Ok(out)
}
