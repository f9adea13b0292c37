use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The closed set of discourse relation types shared by STAC and Molweni.
///
/// Declaration order is the canonical order used for deterministic
/// tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RelationType {
    Comment,
    ClarificationQuestion,
    Elaboration,
    Acknowledgement,
    Continuation,
    Explanation,
    Conditional,
    QuestionAnswerPair,
    Alternation,
    QuestionElaboration,
    Result,
    Background,
    Narration,
    Correction,
    Parallel,
    Contrast,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown relation type {0:?}")]
pub struct UnknownRelation(pub String);

impl RelationType {
    pub const ALL: [RelationType; 16] = [
        RelationType::Comment,
        RelationType::ClarificationQuestion,
        RelationType::Elaboration,
        RelationType::Acknowledgement,
        RelationType::Continuation,
        RelationType::Explanation,
        RelationType::Conditional,
        RelationType::QuestionAnswerPair,
        RelationType::Alternation,
        RelationType::QuestionElaboration,
        RelationType::Result,
        RelationType::Background,
        RelationType::Narration,
        RelationType::Correction,
        RelationType::Parallel,
        RelationType::Contrast,
    ];

    /// Canonical snake_case identifier, e.g. `question_answer_pair`.
    pub fn as_str(self) -> &'static str {
        match self {
            RelationType::Comment => "comment",
            RelationType::ClarificationQuestion => "clarification_question",
            RelationType::Elaboration => "elaboration",
            RelationType::Acknowledgement => "acknowledgement",
            RelationType::Continuation => "continuation",
            RelationType::Explanation => "explanation",
            RelationType::Conditional => "conditional",
            RelationType::QuestionAnswerPair => "question_answer_pair",
            RelationType::Alternation => "alternation",
            RelationType::QuestionElaboration => "question_elaboration",
            RelationType::Result => "result",
            RelationType::Background => "background",
            RelationType::Narration => "narration",
            RelationType::Correction => "correction",
            RelationType::Parallel => "parallel",
            RelationType::Contrast => "contrast",
        }
    }

    /// Human-readable phrase used inside natural-language prompts.
    pub fn phrase(self) -> &'static str {
        match self {
            RelationType::ClarificationQuestion => "clarification-question",
            RelationType::QuestionAnswerPair => "question-answer pair",
            RelationType::QuestionElaboration => "question-elaboration",
            other => other.as_str(),
        }
    }

    /// Position in the canonical order.
    pub fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationType {
    type Err = UnknownRelation;

    /// Case-insensitive; hyphens, spaces and underscores are interchangeable,
    /// and the American spelling "acknowledgment" is accepted.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .trim()
            .split(|c: char| c == '-' || c == '_' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
            .join("_");
        if key == "acknowledgment" {
            return Ok(RelationType::Acknowledgement);
        }
        RelationType::ALL
            .iter()
            .copied()
            .find(|r| r.as_str() == key)
            .ok_or_else(|| UnknownRelation(s.to_string()))
    }
}

impl TryFrom<String> for RelationType {
    type Error = UnknownRelation;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<RelationType> for String {
    fn from(r: RelationType) -> Self {
        r.as_str().to_string()
    }
}
