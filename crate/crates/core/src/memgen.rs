//! Turning chunks into categorized first-person memories.

use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{CharacterProfile, Chunk};
use crate::prompts::{PromptError, TemplateSet, ASSISTANT_SYSTEM};
use crate::provider::{ModelEndpoint, Provider, ProviderError};
use crate::taxonomy::{MemoryCategory, ScreeningStatus};
use crate::text::{blank_line_segments, word_count};

/// Memories must be strictly shorter than this many words.
pub const WORD_LIMIT: usize = 30;

static SEGMENT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?is)^\[\s*(event|relational|attitudinal|identity)\s+memory\s*\]\s*(\S.*)$").unwrap()
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Memory {
    pub memory_id: String,
    pub character_id: String,
    pub chunk_id: String,
    pub category: MemoryCategory,
    pub text: String,
    pub word_count: usize,
    #[serde(default)]
    pub screening_status: ScreeningStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// The response segment did not match `[<Category> Memory] <text>`.
    Malformed,
    WordLimit,
    NotFirstPerson,
}

/// A memory (or raw segment) that did not survive parsing or the rule filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReject {
    pub chunk_id: String,
    pub reason: RejectReason,
    pub text: String,
}

#[derive(Debug, thiserror::Error)]
pub enum MemgenError {
    #[error("ParseFailure: no well-formed memory in response for {chunk_id}; rejected segments: {rejected:?}")]
    ParseFailure { chunk_id: String, rejected: Vec<String> },
    #[error("empty chunk {0}")]
    EmptyChunk(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl MemgenError {
    pub fn name(&self) -> &'static str {
        match self {
            MemgenError::ParseFailure { .. } => "ParseFailure",
            MemgenError::EmptyChunk(_) => "EmptyChunk",
            MemgenError::Provider(e) => e.name(),
            MemgenError::Prompt(e) => e.name(),
        }
    }
}

/// Splits a model response on blank lines and parses each segment as
/// `[<Category> Memory] <text>`. Segments that do not match are returned as
/// rejects. Memory text has its internal whitespace collapsed.
pub fn parse_memory_block(text: &str) -> (Vec<(MemoryCategory, String)>, Vec<String>) {
    let mut parsed = Vec::new();
    let mut rejects = Vec::new();
    for segment in blank_line_segments(text) {
        match SEGMENT.captures(segment) {
            Some(caps) => {
                let category = caps[1].parse().expect("regex only admits known categories");
                let body = caps[2].split_whitespace().collect::<Vec<_>>().join(" ");
                parsed.push((category, body));
            }
            None => rejects.push(segment.to_string()),
        }
    }
    (parsed, rejects)
}

/// Inverse of [`parse_memory_block`] for well-formed pairs.
pub fn serialize_memory_block(memories: &[(MemoryCategory, String)]) -> String {
    memories
        .iter()
        .map(|(c, t)| format!("[{}] {}", c.label(), t))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// True when the first word is the pronoun "I" (including contractions such
/// as "I'm" or "I've").
pub fn is_first_person(text: &str) -> bool {
    let Some(first) = text.split_whitespace().next() else {
        return false;
    };
    let bare = first.trim_end_matches([',', ';', ':', '.', '!', '?']);
    bare == "I" || first.starts_with("I'") || first.starts_with("I\u{2019}")
}

/// Applies the automatic rules: fewer than [`WORD_LIMIT`] words, and
/// first-person phrasing. Everything kept stays pending human screening.
pub fn rule_filter(memories: Vec<Memory>) -> (Vec<Memory>, Vec<(Memory, RejectReason)>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for m in memories {
        if m.word_count >= WORD_LIMIT {
            rejected.push((m, RejectReason::WordLimit));
        } else if !is_first_person(&m.text) {
            rejected.push((m, RejectReason::NotFirstPerson));
        } else {
            kept.push(m);
        }
    }
    (kept, rejected)
}

/// Memories parsed from one chunk, before the rule filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkMemories {
    pub memories: Vec<Memory>,
    pub rejects: Vec<MemoryReject>,
}

/// Builds [`Memory`] values from parsed pairs; ids are positional.
pub fn memories_from_pairs(chunk: &Chunk, pairs: Vec<(MemoryCategory, String)>) -> Vec<Memory> {
    pairs
        .into_iter()
        .enumerate()
        .map(|(pos, (category, text))| Memory {
            memory_id: format!("{}-m{pos:02}", chunk.chunk_id),
            character_id: chunk.character_id.clone(),
            chunk_id: chunk.chunk_id.clone(),
            category,
            word_count: word_count(&text),
            text,
            screening_status: ScreeningStatus::Pending,
        })
        .collect()
}

/// Prompts the constructor model with one chunk and parses its memories.
pub fn generate_memories(
    provider: &Provider,
    endpoint: &ModelEndpoint,
    templates: &TemplateSet,
    profile: &CharacterProfile,
    chunk: &Chunk,
) -> Result<ChunkMemories, MemgenError> {
    if chunk.text.trim().is_empty() {
        return Err(MemgenError::EmptyChunk(chunk.chunk_id.clone()));
    }
    let prompt = templates.memgen(&profile.name, chunk.text.trim())?;
    let reply = provider.chat_text(endpoint, ASSISTANT_SYSTEM, &prompt, 0, 0)?;
    let (pairs, rejected) = parse_memory_block(&reply.response_text);
    for r in &rejected {
        log::warn!("{}: rejected memory segment {r:?}", chunk.chunk_id);
    }
    if pairs.is_empty() {
        return Err(MemgenError::ParseFailure {
            chunk_id: chunk.chunk_id.clone(),
            rejected,
        });
    }
    Ok(ChunkMemories {
        memories: memories_from_pairs(chunk, pairs),
        rejects: rejected
            .into_iter()
            .map(|text| MemoryReject {
                chunk_id: chunk.chunk_id.clone(),
                reason: RejectReason::Malformed,
                text,
            })
            .collect(),
    })
}

/// Result of generating memories for many chunks.
#[derive(Debug, Default)]
pub struct MemgenOutput {
    /// Memories that passed the rule filter, status pending.
    pub memories: Vec<Memory>,
    /// Malformed segments, rule-filter rejects and chunks whose response held
    /// no memory at all.
    pub rejects: Vec<MemoryReject>,
}

/// Runs [`generate_memories`] over `chunks` in parallel and applies
/// [`rule_filter`]. Output follows chunk order, then response order. Parse
/// failures become rejects; provider and template errors abort.
pub fn generate_all(
    provider: &Provider,
    endpoint: &ModelEndpoint,
    templates: &TemplateSet,
    profiles: &[CharacterProfile],
    chunks: &[Chunk],
) -> Result<MemgenOutput, MemgenError> {
    let results: Vec<Result<ChunkMemories, MemgenError>> = chunks
        .par_iter()
        .map(|chunk| {
            let profile = profiles
                .iter()
                .find(|p| p.character_id == chunk.character_id)
                .expect("chunk of an unregistered character");
            generate_memories(provider, endpoint, templates, profile, chunk)
        })
        .collect();
    let mut out = MemgenOutput::default();
    for (chunk, result) in chunks.iter().zip(results) {
        let parsed = match result {
            Ok(parsed) => parsed,
            Err(MemgenError::ParseFailure { chunk_id, rejected }) => {
                out.rejects.extend(rejected.into_iter().map(|text| MemoryReject {
                    chunk_id: chunk_id.clone(),
                    reason: RejectReason::Malformed,
                    text,
                }));
                continue;
            }
            Err(e) => return Err(e),
        };
        out.rejects.extend(parsed.rejects);
        let (kept, rejected) = rule_filter(parsed.memories);
        out.memories.extend(kept);
        out.rejects.extend(rejected.into_iter().map(|(m, reason)| MemoryReject {
            chunk_id: chunk.chunk_id.clone(),
            reason,
            text: m.text,
        }));
    }
    Ok(out)
}
