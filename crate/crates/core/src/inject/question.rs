//! Validation of rewritten second-person questions.

use serde::{Deserialize, Serialize};

/// First words accepted for a general (yes/no) question.
pub const DEFAULT_INTERROGATIVES: &[&str] = &["Do", "Did", "Were", "Was", "Are", "Is", "Have", "Had", "Can", "Would"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionProperty {
    NotInterrogative,
    MissingTerminator,
    NotSecondPerson,
    MultipleQuestions,
}

impl QuestionProperty {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionProperty::NotInterrogative => "not_interrogative",
            QuestionProperty::MissingTerminator => "missing_terminator",
            QuestionProperty::NotSecondPerson => "not_second_person",
            QuestionProperty::MultipleQuestions => "multiple_questions",
        }
    }
}

impl std::fmt::Display for QuestionProperty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn strip_wrapping_quotes(s: &str) -> &str {
    for (open, close) in [('"', '"'), ('\u{201c}', '\u{201d}'), ('\'', '\'')] {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            return s[open.len_utf8()..s.len() - close.len_utf8()].trim();
        }
    }
    s
}

/// Checks a model-written question and returns its cleaned form (trimmed,
/// wrapping quotes removed). Properties are checked in the order
/// interrogative opener, `?` terminator, second person, single question.
pub fn validate_question(text: &str, interrogatives: &[&str]) -> Result<String, QuestionProperty> {
    let q = strip_wrapping_quotes(text.trim());
    let first = q
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric());
    if !interrogatives.iter().any(|w| w.eq_ignore_ascii_case(first)) {
        return Err(QuestionProperty::NotInterrogative);
    }
    if !q.ends_with('?') {
        return Err(QuestionProperty::MissingTerminator);
    }
    let second_person = q
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .any(|w| matches!(w.to_lowercase().as_str(), "you" | "your" | "yours" | "yourself" | "you're" | "you've"));
    if !second_person {
        return Err(QuestionProperty::NotSecondPerson);
    }
    if q.matches('?').count() > 1 || q.lines().filter(|l| !l.trim().is_empty()).count() > 1 {
        return Err(QuestionProperty::MultipleQuestions);
    }
    Ok(q.to_string())
}
