//! Error injection: rewriting a correct memory into a known-knowledge (KKE)
//! or unknown-knowledge (UKE) false memory, then into a yes/no question.

mod diff;
mod question;
mod registry;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use diff::edit_regions;
pub use question::{validate_question, QuestionProperty, DEFAULT_INTERROGATIVES};
pub use registry::{topic_seed, SubDisciplineRegistry};

use crate::corpus::CharacterProfile;
use crate::memgen::Memory;
use crate::prompts::{PromptError, TemplateSet, ASSISTANT_SYSTEM};
use crate::provider::{ModelEndpoint, Provider, ProviderError};
use crate::taxonomy::{ErrorType, MemoryCategory, ScreeningStatus};

/// Review flag raised when a false memory differs from its source in more
/// than one place.
pub const FLAG_MULTIPLE_EDITS: &str = "multiple_edit_regions";

#[derive(Debug, thiserror::Error)]
pub enum InjectError {
    #[error("ParseFailure: response lacks the {0} marker")]
    ParseFailure(&'static str),
    #[error("ValidationFailure: {0}")]
    ValidationFailure(QuestionProperty),
    #[error("RegistryTooSmall: {0} terms, at least 2 required")]
    RegistryTooSmall(usize),
    #[error("InvalidRegistry: {0}")]
    InvalidRegistry(String),
    #[error("memory {0} has not been kept by screening")]
    NotKept(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl InjectError {
    pub fn name(&self) -> &'static str {
        match self {
            InjectError::ParseFailure(_) => "ParseFailure",
            InjectError::ValidationFailure(_) => "ValidationFailure",
            InjectError::RegistryTooSmall(_) => "RegistryTooSmall",
            InjectError::InvalidRegistry(_) => "InvalidRegistry",
            InjectError::NotKept(_) => "NotKept",
            InjectError::Provider(e) => e.name(),
            InjectError::Prompt(e) => e.name(),
        }
    }
}

/// A false memory awaiting its rewrite into a question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionDraft {
    pub query_id: String,
    pub memory_id: String,
    pub character_id: String,
    pub chunk_id: String,
    pub memory_category: MemoryCategory,
    pub error_type: ErrorType,
    pub source_memory: String,
    pub explanation: String,
    pub false_memory: String,
    pub topics: Vec<String>,
    pub edit_regions: usize,
    pub review_flags: Vec<String>,
}

/// A probing question carrying exactly one injected error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorQuery {
    pub query_id: String,
    pub memory_id: String,
    pub character_id: String,
    pub chunk_id: String,
    pub memory_category: MemoryCategory,
    pub error_type: ErrorType,
    pub query_text: String,
    pub source_memory: String,
    pub false_memory: String,
    pub explanation: String,
    pub topics: Vec<String>,
    #[serde(default)]
    pub review_flags: Vec<String>,
    #[serde(default)]
    pub screening_status: ScreeningStatus,
}

/// A memory whose injection or question rewrite failed; its pair can never
/// be complete, so the memory drops out of the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectFailure {
    pub query_id: String,
    pub memory_id: String,
    pub error_type: ErrorType,
    pub stage: String,
    pub error: String,
    pub detail: String,
}

pub fn query_id(memory_id: &str, error_type: ErrorType) -> String {
    format!("{memory_id}-{}", error_type.as_str())
}

fn find_ci(haystack: &str, needle: &str) -> Option<usize> {
    haystack.to_ascii_lowercase().find(&needle.to_ascii_lowercase())
}

/// Extracts `(explanation, manipulated memory)` from a response of the form
/// `[explanation] ...` / `[manipulate] ...`. Markers are case-insensitive;
/// each section runs until the other marker or the end of the text.
pub fn parse_injection(text: &str) -> Result<(String, String), InjectError> {
    const EXPLANATION: &str = "[explanation]";
    const MANIPULATE: &str = "[manipulate]";
    let e = find_ci(text, EXPLANATION).ok_or(InjectError::ParseFailure("[explanation]"))?;
    let m = find_ci(text, MANIPULATE).ok_or(InjectError::ParseFailure("[manipulate]"))?;
    let section = |start: usize, len: usize, other: usize| {
        let begin = start + len;
        let end = if other > start { other } else { text.len() };
        text[begin..end].trim().to_string()
    };
    let explanation = section(e, EXPLANATION.len(), m);
    let manipulated = section(m, MANIPULATE.len(), e);
    if explanation.is_empty() {
        return Err(InjectError::ParseFailure("[explanation]"));
    }
    if manipulated.is_empty() {
        return Err(InjectError::ParseFailure("[manipulate]"));
    }
    Ok((explanation, manipulated))
}

/// Known-knowledge injection: returns `(explanation, false_memory)`.
pub fn inject_kke(
    provider: &Provider,
    endpoint: &ModelEndpoint,
    templates: &TemplateSet,
    profile: &CharacterProfile,
    memory: &Memory,
) -> Result<(String, String), InjectError> {
    let prompt = templates.kke_inject(&profile.name, memory.category, &memory.text)?;
    let reply = provider.chat_text(endpoint, ASSISTANT_SYSTEM, &prompt, 0, 0)?;
    parse_injection(&reply.response_text)
}

/// Unknown-knowledge injection with two sampled reference topics: returns
/// `(explanation, false_memory, topics)`.
pub fn inject_uke(
    provider: &Provider,
    endpoint: &ModelEndpoint,
    templates: &TemplateSet,
    profile: &CharacterProfile,
    memory: &Memory,
    registry: &SubDisciplineRegistry,
    run_seed: u64,
) -> Result<(String, String, [String; 2]), InjectError> {
    let topics = registry.sample_topics(run_seed, &memory.memory_id)?;
    let prompt = templates.uke_inject(&profile.name, memory.category, &memory.text, &topics[0], &topics[1])?;
    let reply = provider.chat_text(endpoint, ASSISTANT_SYSTEM, &prompt, 0, 0)?;
    let (explanation, false_memory) = parse_injection(&reply.response_text)?;
    Ok((explanation, false_memory, topics))
}

/// Rewrites a false memory into a validated second-person yes/no question.
pub fn to_question(
    provider: &Provider,
    endpoint: &ModelEndpoint,
    templates: &TemplateSet,
    profile: &CharacterProfile,
    false_memory: &str,
    interrogatives: &[&str],
) -> Result<String, InjectError> {
    if false_memory.trim().is_empty() {
        return Err(InjectError::ParseFailure("[manipulate]"));
    }
    let prompt = templates.to_question(&profile.name, false_memory)?;
    let reply = provider.chat_text(endpoint, ASSISTANT_SYSTEM, &prompt, 0, 0)?;
    validate_question(&reply.response_text, interrogatives).map_err(InjectError::ValidationFailure)
}

/// Couples the fate of a memory's two queries: the pair is kept only when
/// both are kept and rejected as soon as either is rejected.
pub fn pair_gate(kke: ScreeningStatus, uke: ScreeningStatus) -> ScreeningStatus {
    use ScreeningStatus::*;
    match (kke, uke) {
        (Kept, Kept) => Kept,
        (Rejected, _) | (_, Rejected) => Rejected,
        _ => Pending,
    }
}

/// Applies [`pair_gate`] to every memory's query pair, in place. A query
/// without a partner counts as paired with a rejected one.
pub fn apply_pair_gate(queries: &mut [ErrorQuery]) {
    use std::collections::HashMap;
    let mut by_memory: HashMap<String, (ScreeningStatus, ScreeningStatus)> = HashMap::new();
    for q in queries.iter() {
        let entry = by_memory
            .entry(q.memory_id.clone())
            .or_insert((ScreeningStatus::Rejected, ScreeningStatus::Rejected));
        match q.error_type {
            ErrorType::Kke => entry.0 = q.screening_status,
            ErrorType::Uke => entry.1 = q.screening_status,
        }
    }
    for q in queries.iter_mut() {
        let (k, u) = by_memory[&q.memory_id];
        q.screening_status = pair_gate(k, u);
    }
}

fn make_draft(memory: &Memory, error_type: ErrorType, explanation: String, false_memory: String, topics: Vec<String>) -> InjectionDraft {
    let regions = edit_regions(&memory.text, &false_memory);
    let mut review_flags = Vec::new();
    if regions > 1 {
        review_flags.push(FLAG_MULTIPLE_EDITS.to_string());
    }
    InjectionDraft {
        query_id: query_id(&memory.memory_id, error_type),
        memory_id: memory.memory_id.clone(),
        character_id: memory.character_id.clone(),
        chunk_id: memory.chunk_id.clone(),
        memory_category: memory.category,
        error_type,
        source_memory: memory.text.clone(),
        explanation,
        false_memory,
        topics,
        edit_regions: regions,
        review_flags,
    }
}

fn failure(memory_id: &str, error_type: ErrorType, stage: &str, e: &InjectError) -> InjectFailure {
    InjectFailure {
        query_id: query_id(memory_id, error_type),
        memory_id: memory_id.to_string(),
        error_type,
        stage: stage.to_string(),
        error: e.name().to_string(),
        detail: e.to_string(),
    }
}

fn is_item_failure(e: &InjectError) -> bool {
    matches!(e, InjectError::ParseFailure(_) | InjectError::ValidationFailure(_))
}

/// Drafts one KKE and one UKE false memory for each kept memory, in
/// parallel. Output order follows `memories`, KKE before UKE. Malformed
/// responses are returned as failures; provider errors abort.
pub fn inject_all(
    provider: &Provider,
    endpoint: &ModelEndpoint,
    templates: &TemplateSet,
    profiles: &[CharacterProfile],
    memories: &[Memory],
    registry: &SubDisciplineRegistry,
    run_seed: u64,
) -> Result<(Vec<InjectionDraft>, Vec<InjectFailure>), InjectError> {
    let kept: Vec<&Memory> = memories
        .iter()
        .filter(|m| m.screening_status == ScreeningStatus::Kept)
        .collect();
    let tasks: Vec<(&Memory, ErrorType)> = kept
        .iter()
        .flat_map(|m| ErrorType::ALL.map(|t| (*m, t)))
        .collect();
    let results: Vec<Result<InjectionDraft, InjectError>> = tasks
        .par_iter()
        .map(|(memory, error_type)| {
            let profile = profile_for(profiles, &memory.character_id);
            match error_type {
                ErrorType::Kke => {
                    let (explanation, fm) = inject_kke(provider, endpoint, templates, profile, memory)?;
                    Ok(make_draft(memory, ErrorType::Kke, explanation, fm, vec![]))
                }
                ErrorType::Uke => {
                    let (explanation, fm, topics) =
                        inject_uke(provider, endpoint, templates, profile, memory, registry, run_seed)?;
                    Ok(make_draft(memory, ErrorType::Uke, explanation, fm, topics.to_vec()))
                }
            }
        })
        .collect();
    let mut drafts = Vec::new();
    let mut failures = Vec::new();
    for ((memory, error_type), result) in tasks.iter().zip(results) {
        match result {
            Ok(d) => drafts.push(d),
            Err(e) if is_item_failure(&e) => failures.push(failure(&memory.memory_id, *error_type, "inject", &e)),
            Err(e) => return Err(e),
        }
    }
    Ok((drafts, failures))
}

/// Rewrites every draft into a question, in parallel, preserving order.
pub fn transform_all(
    provider: &Provider,
    endpoint: &ModelEndpoint,
    templates: &TemplateSet,
    profiles: &[CharacterProfile],
    drafts: &[InjectionDraft],
    interrogatives: &[&str],
) -> Result<(Vec<ErrorQuery>, Vec<InjectFailure>), InjectError> {
    let results: Vec<Result<String, InjectError>> = drafts
        .par_iter()
        .map(|d| {
            let profile = profile_for(profiles, &d.character_id);
            to_question(provider, endpoint, templates, profile, &d.false_memory, interrogatives)
        })
        .collect();
    let mut queries = Vec::new();
    let mut failures = Vec::new();
    for (d, result) in drafts.iter().zip(results) {
        match result {
            Ok(query_text) => queries.push(ErrorQuery {
                query_id: d.query_id.clone(),
                memory_id: d.memory_id.clone(),
                character_id: d.character_id.clone(),
                chunk_id: d.chunk_id.clone(),
                memory_category: d.memory_category,
                error_type: d.error_type,
                query_text,
                source_memory: d.source_memory.clone(),
                false_memory: d.false_memory.clone(),
                explanation: d.explanation.clone(),
                topics: d.topics.clone(),
                review_flags: d.review_flags.clone(),
                screening_status: ScreeningStatus::Pending,
            }),
            Err(e) if is_item_failure(&e) => failures.push(failure(&d.memory_id, d.error_type, "transform", &e)),
            Err(e) => return Err(e),
        }
    }
    Ok((queries, failures))
}

fn profile_for<'a>(profiles: &'a [CharacterProfile], character_id: &str) -> &'a CharacterProfile {
    profiles
        .iter()
        .find(|p| p.character_id == character_id)
        .unwrap_or_else(|| panic!("memory of unregistered character {character_id}"))
}
