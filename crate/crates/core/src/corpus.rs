//! Character profiles, corpus normalization, sentence segmentation and
//! paragraph-aware chunking.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::text::slug;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CorpusError {
    #[error("MissingField: profile {path} lacks '{field}'")]
    MissingField { path: String, field: String },
    #[error("EmptyCorpus: {0}")]
    EmptyCorpus(String),
    #[error("InvalidProfile: {0}")]
    InvalidProfile(String),
    #[error("DuplicateCharacter: {0}")]
    DuplicateCharacter(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

impl CorpusError {
    pub fn name(&self) -> &'static str {
        match self {
            CorpusError::MissingField { .. } => "MissingField",
            CorpusError::EmptyCorpus(_) => "EmptyCorpus",
            CorpusError::InvalidProfile(_) => "InvalidProfile",
            CorpusError::DuplicateCharacter(_) => "DuplicateCharacter",
            CorpusError::Io { .. } => "IoError",
        }
    }
}

/// The role identity handed to the responder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub character_id: String,
    pub name: String,
    pub persona_instruction: String,
    pub corpus_path: PathBuf,
}

/// A profile plus its normalized corpus text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Character {
    pub profile: CharacterProfile,
    /// Paragraphs separated by exactly one blank line, whitespace collapsed
    /// within each paragraph.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub character_id: String,
    pub text: String,
    pub sentence_count: usize,
    pub ordinal: usize,
}

#[derive(Deserialize)]
struct ProfileFile {
    name: Option<String>,
    persona_instruction: Option<String>,
    corpus_path: Option<PathBuf>,
    character_id: Option<String>,
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Collapses whitespace inside paragraphs; blank lines separate paragraphs.
pub fn normalize(raw: &str) -> String {
    crate::text::blank_line_segments(raw)
        .into_iter()
        .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Reads a JSON profile (`name`, `persona_instruction`, `corpus_path`, and an
/// optional `character_id`) and its corpus. `corpus_file` overrides the
/// profile's `corpus_path`; a relative `corpus_path` resolves against the
/// profile's directory.
pub fn ingest_character(profile_file: &Path, corpus_file: Option<&Path>) -> Result<Character, CorpusError> {
    let raw = read(profile_file)?;
    let shown = profile_file.display().to_string();
    let parsed: ProfileFile = serde_json::from_str(&raw)
        .map_err(|e| CorpusError::InvalidProfile(format!("{shown}: {e}")))?;
    let missing = |field: &str| CorpusError::MissingField {
        path: shown.clone(),
        field: field.into(),
    };
    let name = parsed
        .name
        .filter(|n| !n.trim().is_empty())
        .ok_or_else(|| missing("name"))?
        .trim()
        .to_string();
    let persona_instruction = parsed
        .persona_instruction
        .filter(|p| !p.trim().is_empty())
        .ok_or_else(|| missing("persona_instruction"))?;
    if !persona_instruction.contains(&name) {
        return Err(CorpusError::InvalidProfile(format!(
            "{shown}: persona_instruction does not mention '{name}'"
        )));
    }
    let corpus_path = match corpus_file {
        Some(p) => p.to_path_buf(),
        None => {
            let p = parsed.corpus_path.ok_or_else(|| missing("corpus_path"))?;
            if p.is_relative() {
                profile_file.parent().unwrap_or(Path::new(".")).join(p)
            } else {
                p
            }
        }
    };
    let character_id = parsed
        .character_id
        .map(|id| slug(&id))
        .unwrap_or_else(|| slug(&name));
    if character_id.is_empty() {
        return Err(CorpusError::InvalidProfile(format!("{shown}: empty character id")));
    }
    let text = normalize(&read(&corpus_path)?);
    if text.is_empty() {
        return Err(CorpusError::EmptyCorpus(corpus_path.display().to_string()));
    }
    Ok(Character {
        profile: CharacterProfile {
            character_id,
            name,
            persona_instruction,
            corpus_path,
        },
        text,
    })
}

/// Rejects duplicate character ids in a roster.
pub fn check_roster(characters: &[Character]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for c in characters {
        if !seen.insert(c.profile.character_id.as_str()) {
            return Err(CorpusError::DuplicateCharacter(c.profile.character_id.clone()));
        }
    }
    Ok(())
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "st", "jr", "sr", "prof", "gen", "col", "lt", "capt", "rev", "hon", "mt",
    "vs", "etc", "e.g", "i.e", "no", "vol", "ca", "c", "fr", "sgt", "gov", "pres", "jan", "feb", "mar",
    "apr", "aug", "sept", "sep", "oct", "nov", "dec", "op", "approx",
];

const CLOSERS: &[char] = &['"', '\'', ')', ']', '\u{201d}', '\u{2019}'];
const OPENERS: &[char] = &['"', '\'', '(', '[', '\u{201c}', '\u{2018}'];

/// A sentence as a byte span of the normalized text. `end` is the start of
/// the next sentence, so the trailing separator belongs to this sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
    pub ends_paragraph: bool,
}

fn is_abbreviation(before: &str) -> bool {
    let word = before.rsplit(' ').next().unwrap_or("");
    let word = word.trim_start_matches(OPENERS);
    if word.chars().count() == 1 && word.chars().all(|c| c.is_uppercase()) {
        return true; // initials such as "J. S. Bach"
    }
    ABBREVIATIONS.contains(&word.to_lowercase().as_str())
}

fn starts_sentence(rest: &str) -> bool {
    let mut chars = rest.chars();
    match chars.next() {
        Some(c) if c.is_uppercase() => true,
        Some(c) if OPENERS.contains(&c) => chars.next().is_some_and(|d| d.is_uppercase()),
        _ => false,
    }
}

/// Splits one paragraph (no newlines, single spaces) into sentence end
/// offsets relative to the paragraph, each pointing just past its closing
/// punctuation and quotes.
fn paragraph_sentence_ends(p: &str) -> Vec<usize> {
    let mut ends = Vec::new();
    let bytes: Vec<(usize, char)> = p.char_indices().collect();
    let mut i = 0;
    while i < bytes.len() {
        let (pos, c) = bytes[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < bytes.len() && (matches!(bytes[j].1, '.' | '!' | '?') || CLOSERS.contains(&bytes[j].1)) {
                j += 1;
            }
            let end = if j < bytes.len() { bytes[j].0 } else { p.len() };
            if j >= bytes.len() {
                break; // paragraph end closes the sentence anyway
            }
            let followed = bytes[j].1 == ' ' && starts_sentence(&p[bytes[j].0 + 1..]);
            let abbrev = c == '.' && j == i + 1 && is_abbreviation(&p[..pos]);
            if followed && !abbrev {
                ends.push(end);
            }
            i = j;
        } else {
            i += 1;
        }
    }
    ends.push(p.len());
    ends
}

/// Sentence segmentation over normalized text.
pub fn segment_sentences(text: &str) -> Vec<SentenceSpan> {
    let mut spans = Vec::new();
    let mut offset = 0;
    let paragraphs: Vec<&str> = text.split("\n\n").collect();
    for (pi, para) in paragraphs.iter().enumerate() {
        let sep_len = if pi + 1 < paragraphs.len() { 2 } else { 0 };
        if para.trim().is_empty() {
            offset += para.len() + sep_len;
            continue;
        }
        let ends = paragraph_sentence_ends(para);
        let mut start = 0;
        for (k, &end) in ends.iter().enumerate() {
            let last = k + 1 == ends.len();
            // include the following space (or the paragraph separator)
            let stop = if last { para.len() + sep_len } else { end + 1 };
            spans.push(SentenceSpan {
                start: offset + start,
                end: offset + stop,
                ends_paragraph: last,
            });
            start = stop;
        }
        offset += para.len() + sep_len;
    }
    spans
}

/// Packs sentences into chunks of about `target_sentences`.
///
/// A chunk ends at a paragraph boundary when one falls within two sentences
/// of the target (closest wins, shorter on ties; the end of the text counts
/// as a boundary), otherwise after exactly `target_sentences`. A final chunk
/// of a single sentence is merged into the previous chunk.
pub fn chunk(character: &Character, target_sentences: usize) -> Result<Vec<Chunk>, CorpusError> {
    assert!(target_sentences >= 1, "target_sentences must be >= 1");
    let id = &character.profile.character_id;
    let sentences = segment_sentences(&character.text);
    if sentences.is_empty() {
        return Err(CorpusError::EmptyCorpus(id.clone()));
    }
    let sizes = pack(&sentences, target_sentences);
    let mut chunks = Vec::with_capacity(sizes.len());
    let mut first = 0;
    for (ordinal, size) in sizes.into_iter().enumerate() {
        let start = sentences[first].start;
        let end = sentences[first + size - 1].end;
        chunks.push(Chunk {
            chunk_id: format!("{id}-c{ordinal:03}"),
            character_id: id.clone(),
            text: character.text[start..end].to_string(),
            sentence_count: size,
            ordinal,
        });
        first += size;
    }
    Ok(chunks)
}

fn pack(sentences: &[SentenceSpan], target: usize) -> Vec<usize> {
    let n = sentences.len();
    let lo = target.saturating_sub(2).max(1);
    let hi = target + 2;
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let remaining = n - i;
        let boundary = (lo..=hi.min(remaining))
            .filter(|&size| sentences[i + size - 1].ends_paragraph)
            .min_by_key(|&size| (size.abs_diff(target), size));
        let size = boundary.unwrap_or(target.min(remaining));
        sizes.push(size);
        i += size;
    }
    if sizes.len() > 1 && *sizes.last().unwrap() < 2 {
        let tail = sizes.pop().unwrap();
        *sizes.last_mut().unwrap() += tail;
    }
    sizes
}
