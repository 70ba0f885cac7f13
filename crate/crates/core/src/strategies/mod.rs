//! The seven detection strategies and their traced outputs.
//!
//! Every strategy sends the character's persona instruction as system text
//! and its filled template as user text. Per record the provider-call
//! sequence is fixed:
//!
//! | strategy        | calls                                           |
//! |-----------------|-------------------------------------------------|
//! | vanilla, cot, few_shot | 1 chat                                   |
//! | rag, rag_few_shot | 1 embed (query) + 1 chat                      |
//! | self_reflection | 2 chat                                          |
//! | s2rd            | recollection chat, `m` seed embeds, doubt chat, final chat |
//!
//! The s2rd self-narrative is generated once per character and responder
//! and kept in a [`NarrativeCache`]; its call is logged there rather than in
//! the record that happened to trigger it.

mod cases;
mod narrative;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cases::{Case, CaseBank};
pub use narrative::{Narrative, NarrativeCache};

use crate::corpus::CharacterProfile;
use crate::dataset::DatasetRecord;
use crate::prompts::{PromptError, TemplateSet};
use crate::provider::{ModelEndpoint, Provider, ProviderError};
use crate::retrieval::{rank_key, CorpusIndex, Hit, RetrievalError};
use crate::text::{blank_line_segments, sha256_hex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Vanilla,
    Cot,
    FewShot,
    SelfReflection,
    Rag,
    RagFewShot,
    S2rd,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Vanilla,
        StrategyKind::Cot,
        StrategyKind::FewShot,
        StrategyKind::SelfReflection,
        StrategyKind::Rag,
        StrategyKind::RagFewShot,
        StrategyKind::S2rd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Vanilla => "vanilla",
            StrategyKind::Cot => "cot",
            StrategyKind::FewShot => "few_shot",
            StrategyKind::SelfReflection => "self_reflection",
            StrategyKind::Rag => "rag",
            StrategyKind::RagFewShot => "rag_few_shot",
            StrategyKind::S2rd => "s2rd",
        }
    }

    /// Display name used in result tables.
    pub fn title(self) -> &'static str {
        match self {
            StrategyKind::Vanilla => "Vanilla",
            StrategyKind::Cot => "CoT",
            StrategyKind::FewShot => "Few-shot",
            StrategyKind::SelfReflection => "Self-Reflection",
            StrategyKind::Rag => "RAG",
            StrategyKind::RagFewShot => "RAG+Few-shot",
            StrategyKind::S2rd => "S2RD",
        }
    }

    pub fn needs_cases(self) -> bool {
        matches!(self, StrategyKind::FewShot | StrategyKind::RagFewShot | StrategyKind::S2rd)
    }

    pub fn needs_index(self) -> bool {
        matches!(self, StrategyKind::Rag | StrategyKind::RagFewShot | StrategyKind::S2rd)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown strategy '{s}'"))
    }
}

fn default_k() -> usize {
    3
}
fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Responder endpoint id.
    pub responder: String,
    /// Chunks retrieved for the RAG strategies.
    #[serde(default = "default_k")]
    pub k_retrieval: usize,
    /// Seed memories requested during recollection.
    #[serde(default = "default_k")]
    pub m_seeds: usize,
    /// Chunks retrieved per seed memory.
    #[serde(default = "default_one")]
    pub k_per_seed: usize,
    /// Recollection/doubt passes.
    #[serde(default = "default_one")]
    pub iterations: usize,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, responder: &str) -> Self {
        StrategySpec {
            kind,
            responder: responder.to_string(),
            k_retrieval: 3,
            m_seeds: 3,
            k_per_seed: 1,
            iterations: 1,
        }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        for (name, v) in [
            ("k_retrieval", self.k_retrieval),
            ("m_seeds", self.m_seeds),
            ("k_per_seed", self.k_per_seed),
            ("iterations", self.iterations),
        ] {
            if v == 0 {
                return Err(StrategyError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Chat,
    Embed,
}

/// One provider call made while handling a record. Hashes rather than full
/// texts keep response files compact; cache status is deliberately left out
/// so reruns against a warm cache produce identical files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSummary {
    pub stage: String,
    pub kind: CallKind,
    pub endpoint: String,
    pub request_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_sha256: Option<String>,
}

impl CallSummary {
    pub fn chat(stage: &str, endpoint: &str, user_text: &str, response: &str) -> Self {
        CallSummary {
            stage: stage.to_string(),
            kind: CallKind::Chat,
            endpoint: endpoint.to_string(),
            request_sha256: sha256_hex(user_text),
            response_sha256: Some(sha256_hex(response)),
        }
    }

    pub fn embed(stage: &str, endpoint: &str, text: &str) -> Self {
        CallSummary {
            stage: stage.to_string(),
            kind: CallKind::Embed,
            endpoint: endpoint.to_string(),
            request_sha256: sha256_hex(text),
            response_sha256: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narrative: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_memories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recollection_set: Option<Vec<Hit>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doubt: Option<String>,
    /// Retrieved chunks in rank order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_context: Option<Vec<Hit>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection_first_pass: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub query_id: String,
    pub strategy: StrategyKind,
    pub responder: String,
    pub trial_index: u32,
    pub response_text: String,
    pub trace: Trace,
    pub call_log: Vec<CallSummary>,
}

impl DetectionRecord {
    pub fn chat_calls(&self) -> usize {
        self.call_log.iter().filter(|c| c.kind == CallKind::Chat).count()
    }

    pub fn embed_calls(&self) -> usize {
        self.call_log.iter().filter(|c| c.kind == CallKind::Embed).count()
    }
}

/// A record that could not be produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub query_id: String,
    pub trial_index: u32,
    pub stage: String,
    pub error: String,
    pub detail: String,
}

#[derive(Debug, thiserror::Error)]
pub enum StrategyError {
    #[error("{stage}: {source}")]
    Provider {
        stage: &'static str,
        #[source]
        source: ProviderError,
    },
    #[error("{stage}: {source}")]
    Retrieval {
        stage: &'static str,
        #[source]
        source: RetrievalError,
    },
    #[error("{stage}: {source}")]
    Prompt {
        stage: &'static str,
        #[source]
        source: PromptError,
    },
    #[error("SeedParseFailure: recollection reply held no seed memory")]
    SeedParseFailure,
    #[error("ConfigError: {0}")]
    Config(String),
    #[error("CaseOverlap: case question also appears in the dataset: {0}")]
    CaseOverlap(String),
    #[error("UnknownCharacter: {0}")]
    UnknownCharacter(String),
    #[error("EmptyIndex: no index for character {0}")]
    MissingIndex(String),
}

/// Errors that can be tagged with the pipeline stage where they occurred.
pub trait StageError {
    fn at_stage(self, stage: &'static str) -> StrategyError;
}

impl StageError for ProviderError {
    fn at_stage(self, stage: &'static str) -> StrategyError {
        StrategyError::Provider { stage, source: self }
    }
}

impl StageError for RetrievalError {
    fn at_stage(self, stage: &'static str) -> StrategyError {
        StrategyError::Retrieval { stage, source: self }
    }
}

impl StageError for PromptError {
    fn at_stage(self, stage: &'static str) -> StrategyError {
        StrategyError::Prompt { stage, source: self }
    }
}

impl StrategyError {
    pub fn at<E: StageError>(stage: &'static str) -> impl FnOnce(E) -> StrategyError {
        move |e| e.at_stage(stage)
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategyError::Provider { source, .. } => source.name(),
            StrategyError::Retrieval { source, .. } => source.name(),
            StrategyError::Prompt { source, .. } => source.name(),
            StrategyError::SeedParseFailure => "SeedParseFailure",
            StrategyError::Config(_) => "ConfigError",
            StrategyError::CaseOverlap(_) => "CaseOverlap",
            StrategyError::UnknownCharacter(_) => "UnknownCharacter",
            StrategyError::MissingIndex(_) => "EmptyIndex",
        }
    }

    pub fn stage(&self) -> &'static str {
        match self {
            StrategyError::Provider { stage, .. }
            | StrategyError::Retrieval { stage, .. }
            | StrategyError::Prompt { stage, .. } => stage,
            StrategyError::SeedParseFailure => "recollection",
            _ => "setup",
        }
    }
}

/// Shared, read-only inputs for running strategies.
pub struct StrategyContext<'a> {
    pub provider: &'a Provider,
    pub templates: &'a TemplateSet,
    pub responder: &'a ModelEndpoint,
    /// Embedding endpoint for query and seed retrieval.
    pub embedder: Option<&'a ModelEndpoint>,
    pub case_bank: Option<&'a CaseBank>,
    /// Per-character indexes, keyed by character id.
    pub indexes: &'a BTreeMap<String, CorpusIndex>,
    /// Chunk text by chunk id.
    pub chunk_texts: &'a HashMap<String, String>,
    pub narratives: &'a NarrativeCache,
    pub characters: &'a [CharacterProfile],
}

impl StrategyContext<'_> {
    /// Checks that everything `spec` needs is present for `records`.
    pub fn check(&self, spec: &StrategySpec, records: &[DatasetRecord]) -> Result<(), StrategyError> {
        spec.validate()?;
        if spec.responder != self.responder.id {
            return Err(StrategyError::Config(format!(
                "spec names responder '{}' but context has '{}'",
                spec.responder, self.responder.id
            )));
        }
        if spec.kind.needs_cases() {
            let bank = self
                .case_bank
                .ok_or_else(|| StrategyError::Config(format!("{} requires a case bank", spec.kind)))?;
            bank.check_overlap(records)?;
        }
        for r in records {
            self.profile(&r.character_id)?;
            if spec.kind.needs_index() {
                self.index(&r.character_id)?;
            }
        }
        if spec.kind.needs_index() && self.embedder.is_none() {
            return Err(StrategyError::Config(format!("{} requires an embedding endpoint", spec.kind)));
        }
        Ok(())
    }

    fn profile(&self, character_id: &str) -> Result<&CharacterProfile, StrategyError> {
        self.characters
            .iter()
            .find(|c| c.character_id == character_id)
            .ok_or_else(|| StrategyError::UnknownCharacter(character_id.to_string()))
    }

    fn index(&self, character_id: &str) -> Result<&CorpusIndex, StrategyError> {
        self.indexes
            .get(character_id)
            .filter(|i| !i.is_empty())
            .ok_or_else(|| StrategyError::MissingIndex(character_id.to_string()))
    }

    fn embedder(&self) -> Result<&ModelEndpoint, StrategyError> {
        self.embedder
            .ok_or_else(|| StrategyError::Config("retrieval requires an embedding endpoint".into()))
    }

    fn cases(&self) -> Result<&CaseBank, StrategyError> {
        self.case_bank
            .ok_or_else(|| StrategyError::Config("strategy requires a case bank".into()))
    }

    /// Chunk texts joined with blank lines, in the given order.
    fn context_text(&self, hits: &[Hit]) -> String {
        hits.iter()
            .map(|h| self.chunk_texts.get(&h.chunk_id).map(|t| t.trim()).unwrap_or(""))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

/// Accumulates the call log while a record runs.
struct Recorder<'a, 'c> {
    ctx: &'a StrategyContext<'c>,
    system: &'a str,
    trial: u32,
    log: Vec<CallSummary>,
}

impl Recorder<'_, '_> {
    fn chat(&mut self, stage: &'static str, user: &str, attempt: u32) -> Result<String, StrategyError> {
        let reply = self
            .ctx
            .provider
            .chat_text(self.ctx.responder, self.system, user, self.trial, attempt)
            .map_err(StrategyError::at(stage))?;
        self.log
            .push(CallSummary::chat(stage, &self.ctx.responder.id, user, &reply.response_text));
        Ok(reply.response_text)
    }

    fn search(&mut self, stage: &'static str, index: &CorpusIndex, text: &str, k: usize) -> Result<Vec<Hit>, StrategyError> {
        let embedder = self.ctx.embedder()?;
        self.log.push(CallSummary::embed(stage, &embedder.id, text));
        index
            .search(self.ctx.provider, embedder, text, k)
            .map_err(StrategyError::at(stage))
    }
}

/// Runs one strategy on one dataset record.
pub fn run_record(
    ctx: &StrategyContext<'_>,
    spec: &StrategySpec,
    record: &DatasetRecord,
    trial: u32,
) -> Result<DetectionRecord, StrategyError> {
    let profile = ctx.profile(&record.character_id)?;
    let t = ctx.templates;
    let name = profile.name.as_str();
    let query = record.query.as_str();
    let mut rec = Recorder {
        ctx,
        system: &profile.persona_instruction,
        trial,
        log: Vec::new(),
    };
    let mut trace = Trace::default();
    let prompt = |stage: &'static str, r: Result<String, PromptError>| r.map_err(StrategyError::at(stage));

    let response = match spec.kind {
        StrategyKind::Vanilla => rec.chat("final", &prompt("final", t.vanilla(name, query))?, 0)?,
        StrategyKind::Cot => rec.chat("final", &prompt("final", t.cot(name, query))?, 0)?,
        StrategyKind::FewShot => {
            let blocks = ctx.cases()?.blocks();
            rec.chat("final", &prompt("final", t.few_shot(name, &blocks, query))?, 0)?
        }
        StrategyKind::SelfReflection => {
            let first = rec.chat("first_pass", &prompt("first_pass", t.vanilla(name, query))?, 0)?;
            let second = rec.chat("final", &prompt("final", t.self_reflection(name, &first, query))?, 0)?;
            trace.reflection_first_pass = Some(first);
            second
        }
        StrategyKind::Rag | StrategyKind::RagFewShot => {
            let index = ctx.index(&record.character_id)?;
            let hits = rec.search("retrieval", index, query, spec.k_retrieval)?;
            let info = ctx.context_text(&hits);
            trace.retrieved_context = Some(hits);
            let user = if spec.kind == StrategyKind::Rag {
                prompt("final", t.rag(name, &info, query))?
            } else {
                prompt("final", t.rag_few_shot(name, &info, &ctx.cases()?.blocks(), query))?
            };
            rec.chat("final", &user, 0)?
        }
        StrategyKind::S2rd => run_s2rd(&mut rec, spec, profile, record, &mut trace)?,
    };

    Ok(DetectionRecord {
        query_id: record.query_id.clone(),
        strategy: spec.kind,
        responder: ctx.responder.id.clone(),
        trial_index: trial,
        response_text: response,
        trace,
        call_log: rec.log,
    })
}

/// Orders recollected chunks by descending score, ties by chunk id.
fn rank(mut hits: Vec<Hit>) -> Vec<Hit> {
    hits.sort_by(|a, b| {
        rank_key(b.score)
            .cmp(&rank_key(a.score))
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    });
    hits
}

fn run_s2rd(
    rec: &mut Recorder<'_, '_>,
    spec: &StrategySpec,
    profile: &CharacterProfile,
    record: &DatasetRecord,
    trace: &mut Trace,
) -> Result<String, StrategyError> {
    let ctx = rec.ctx;
    let t = ctx.templates;
    let name = profile.name.as_str();
    let query = record.query.as_str();
    let index = ctx.index(&record.character_id)?;
    let cases = ctx.cases()?.joined();
    let narrative = ctx
        .narratives
        .get_or_generate(ctx.provider, ctx.responder, t, profile)?
        .text;

    let mut seeds_all = Vec::new();
    let mut recollected: BTreeMap<String, f64> = BTreeMap::new();
    let mut self_rag = String::new();
    let mut doubt = String::new();
    for pass in 0..spec.iterations as u32 {
        let user = t
            .s2rd_recollection(name, &narrative, query)
            .map_err(StrategyError::at("recollection"))?;
        let reply = rec.chat("recollection", &user, pass)?;
        let seeds: Vec<String> = blank_line_segments(&reply)
            .into_iter()
            .take(spec.m_seeds)
            .map(String::from)
            .collect();
        if seeds.is_empty() {
            return Err(StrategyError::SeedParseFailure);
        }
        if seeds.len() < spec.m_seeds {
            log::warn!(
                "{}: recollection produced {} of {} seed memories",
                record.query_id,
                seeds.len(),
                spec.m_seeds
            );
        }
        for seed in &seeds {
            for hit in rec.search("recollection_retrieval", index, seed, spec.k_per_seed)? {
                let best = recollected.entry(hit.chunk_id).or_insert(hit.score);
                *best = best.max(hit.score);
            }
        }
        seeds_all.extend(seeds);
        let ranked = rank(
            recollected
                .iter()
                .map(|(id, &score)| Hit {
                    chunk_id: id.clone(),
                    score,
                })
                .collect(),
        );
        self_rag = ctx.context_text(&ranked);
        let user = t
            .s2rd_doubt(name, &narrative, &self_rag, query)
            .map_err(StrategyError::at("doubt"))?;
        doubt = rec.chat("doubt", &user, pass)?;
    }
    let user = t
        .s2rd_final(name, &narrative, &self_rag, &cases, &doubt, query)
        .map_err(StrategyError::at("final"))?;
    let response = rec.chat("final", &user, 0)?;

    trace.narrative = Some(narrative);
    trace.seed_memories = Some(seeds_all);
    trace.recollection_set = Some(rank(
        recollected
            .into_iter()
            .map(|(chunk_id, score)| Hit { chunk_id, score })
            .collect(),
    ));
    trace.doubt = Some(doubt);
    Ok(response)
}

/// Runs `spec` over `records` × `trials` on a pool of `workers` threads.
/// Results are ordered by `(query_id, trial_index)`; per-record failures
/// are returned separately and never abort the batch.
pub fn run_all(
    ctx: &StrategyContext<'_>,
    spec: &StrategySpec,
    records: &[DatasetRecord],
    trials: u32,
    workers: usize,
) -> Result<(Vec<DetectionRecord>, Vec<RunFailure>), StrategyError> {
    ctx.check(spec, records)?;
    let jobs: Vec<(&DatasetRecord, u32)> = records
        .iter()
        .flat_map(|r| (0..trials).map(move |t| (r, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| StrategyError::Config(e.to_string()))?;
    let results: Vec<Result<DetectionRecord, (String, u32, StrategyError)>> = pool.install(|| {
        jobs.par_iter()
            .map(|(r, t)| run_record(ctx, spec, r, *t).map_err(|e| (r.query_id.clone(), *t, e)))
            .collect()
    });
    let mut done = Vec::new();
    let mut failed = Vec::new();
    for result in results {
        match result {
            Ok(d) => done.push(d),
            Err((query_id, trial_index, e)) => {
                log::error!("{query_id} trial {trial_index}: {e}");
                failed.push(RunFailure {
                    query_id,
                    trial_index,
                    stage: e.stage().to_string(),
                    error: e.name().to_string(),
                    detail: e.to_string(),
                });
            }
        }
    }
    done.sort_by(|a, b| (&a.query_id, a.trial_index).cmp(&(&b.query_id, b.trial_index)));
    failed.sort_by(|a, b| (&a.query_id, a.trial_index).cmp(&(&b.query_id, b.trial_index)));
    Ok((done, failed))
}
