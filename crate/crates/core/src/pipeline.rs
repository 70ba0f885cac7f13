//! Stage orchestration over a workspace directory.
//!
//! ```text
//! <root>/
//!   characters.json            ingested profiles and normalized corpora
//!   chunks.jsonl
//!   memories.jsonl             rule-filtered memories with screening status
//!   memory_rejects.jsonl
//!   drafts.jsonl               injected false memories
//!   queries.jsonl              questions with screening status
//!   inject_failures.jsonl
//!   screening/                 review items, verdicts, finalize reports
//!   dataset.jsonl              + dataset.manifest.json
//!   indexes/<character>.idx
//!   runs/<run_id>/             manifest.json, responses.jsonl, failures.jsonl,
//!                              narratives.jsonl, judgments.jsonl, score.json
//! ```
//!
//! Each stage reads its inputs from the workspace and rewrites its outputs
//! whole, so rerunning a stage with unchanged inputs and caches is a no-op.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Character, CharacterProfile, Chunk};
use crate::dataset::{self, DatasetStats, ProbingDataset};
use crate::error::{Error, Result};
use crate::inject::{self, ErrorQuery, InjectFailure, InjectionDraft, SubDisciplineRegistry};
use crate::jsonl;
use crate::judge::{self, Judgment, ScoreTable};
use crate::memgen::{self, Memory, MemoryReject};
use crate::prompts::TemplateSet;
use crate::provider::{EndpointKind, ModelEndpoint, Provider};
use crate::report::{self, Layout, ReportDoc, ReportFormat, ReportRow};
use crate::retrieval::{self, CorpusIndex};
use crate::screening::{AutoRules, ItemKind, ReviewItem, ScreeningReport, ScreeningStore};
use crate::strategies::{
    self, CaseBank, DetectionRecord, NarrativeCache, RunFailure, StrategyContext, StrategySpec,
};
use crate::taxonomy::ScreeningStatus;

/// Paths inside a workspace.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn characters(&self) -> PathBuf {
        self.root.join("characters.json")
    }
    pub fn chunks(&self) -> PathBuf {
        self.root.join("chunks.jsonl")
    }
    pub fn memories(&self) -> PathBuf {
        self.root.join("memories.jsonl")
    }
    pub fn memory_rejects(&self) -> PathBuf {
        self.root.join("memory_rejects.jsonl")
    }
    pub fn drafts(&self) -> PathBuf {
        self.root.join("drafts.jsonl")
    }
    pub fn queries(&self) -> PathBuf {
        self.root.join("queries.jsonl")
    }
    pub fn inject_failures(&self) -> PathBuf {
        self.root.join("inject_failures.jsonl")
    }
    pub fn screening(&self) -> PathBuf {
        self.root.join("screening")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }
    pub fn index(&self, character_id: &str) -> PathBuf {
        self.root.join("indexes").join(format!("{character_id}.idx"))
    }
    pub fn run(&self, run_id: &str) -> RunDir {
        RunDir {
            root: self.root.join("runs").join(run_id),
        }
    }

    fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_characters(&self) -> Result<Vec<Character>> {
        let path = self.characters();
        if !path.exists() {
            return Ok(vec![]);
        }
        Self::read_json(&path)
    }

    pub fn profiles(&self) -> Result<Vec<CharacterProfile>> {
        Ok(self.load_characters()?.into_iter().map(|c| c.profile).collect())
    }

    pub fn load_chunks(&self) -> Result<Vec<Chunk>> {
        Ok(jsonl::read(&self.chunks())?)
    }

    pub fn load_memories(&self) -> Result<Vec<Memory>> {
        Ok(jsonl::read(&self.memories())?)
    }

    pub fn load_queries(&self) -> Result<Vec<ErrorQuery>> {
        Ok(jsonl::read(&self.queries())?)
    }

    pub fn open_screening(&self, roster: Vec<String>) -> Result<ScreeningStore> {
        Ok(ScreeningStore::open(&self.screening(), roster)?)
    }
}

/// Files of one strategy run.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn responses(&self) -> PathBuf {
        self.root.join("responses.jsonl")
    }
    pub fn failures(&self) -> PathBuf {
        self.root.join("failures.jsonl")
    }
    pub fn narratives(&self) -> PathBuf {
        self.root.join("narratives.jsonl")
    }
    pub fn judgments(&self) -> PathBuf {
        self.root.join("judgments.jsonl")
    }
    pub fn score(&self) -> PathBuf {
        self.root.join("score.json")
    }
    pub fn report(&self, format: ReportFormat) -> PathBuf {
        self.root.join(format!("report.{}", format.extension()))
    }

    pub fn load_manifest(&self) -> Result<RunManifest> {
        Workspace::read_json(&self.manifest())
    }
}

/// Advisory lock on a directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(crate::jsonl::JsonlError::from)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text + "\n").map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

/// Provider, templates and endpoints shared by all stages.
pub struct Engine {
    pub provider: Provider,
    pub templates: TemplateSet,
    pub endpoints: BTreeMap<String, ModelEndpoint>,
    pub workers: usize,
}

impl Engine {
    pub fn endpoint(&self, id: &str, kind: EndpointKind) -> Result<&ModelEndpoint> {
        let ep = self
            .endpoints
            .get(id)
            .ok_or_else(|| Error::Config(format!("unknown endpoint id '{id}'")))?;
        if ep.kind != kind {
            return Err(Error::Config(format!("endpoint '{id}' is not a {kind:?} endpoint")));
        }
        Ok(ep)
    }
}

/// Ingests profiles, replacing characters with the same id.
pub fn ingest(ws: &Workspace, profiles: &[(PathBuf, Option<PathBuf>)]) -> Result<Vec<Character>> {
    let mut by_id: BTreeMap<String, Character> = ws
        .load_characters()?
        .into_iter()
        .map(|c| (c.profile.character_id.clone(), c))
        .collect();
    let mut fresh = Vec::new();
    for (profile, corpus_file) in profiles {
        fresh.push(corpus::ingest_character(profile, corpus_file.as_deref())?);
    }
    corpus::check_roster(&fresh)?;
    for c in fresh {
        by_id.insert(c.profile.character_id.clone(), c);
    }
    let all: Vec<Character> = by_id.into_values().collect();
    write_json(&ws.characters(), &all)?;
    Ok(all)
}

pub fn chunk(ws: &Workspace, target_sentences: usize) -> Result<Vec<Chunk>> {
    if target_sentences == 0 {
        return Err(Error::Config("target_sentences must be at least 1".into()));
    }
    let characters = ws.load_characters()?;
    if characters.is_empty() {
        return Err(Error::Config("no characters ingested".into()));
    }
    let mut chunks = Vec::new();
    for c in &characters {
        chunks.extend(corpus::chunk(c, target_sentences)?);
    }
    jsonl::write(&ws.chunks(), &chunks)?;
    Ok(chunks)
}

/// Generates memories for every chunk, applies the rule filter and queues
/// the survivors for memory screening.
pub fn gen_memories(ws: &Workspace, engine: &Engine, constructor: &str) -> Result<Vec<Memory>> {
    let endpoint = engine.endpoint(constructor, EndpointKind::Chat)?;
    let chunks = ws.load_chunks()?;
    let profiles = ws.profiles()?;
    let out = memgen::generate_all(&engine.provider, endpoint, &engine.templates, &profiles, &chunks)?;
    jsonl::write(&ws.memories(), &out.memories)?;
    jsonl::write::<MemoryReject>(&ws.memory_rejects(), &out.rejects)?;
    let chunk_text: HashMap<&str, &str> = chunks.iter().map(|c| (c.chunk_id.as_str(), c.text.as_str())).collect();
    let mut store = ws.open_screening(vec![])?;
    store.add_items(
        out.memories
            .iter()
            .map(|m| ReviewItem::for_memory(m, chunk_text[m.chunk_id.as_str()].trim())),
    )?;
    Ok(out.memories)
}

/// Applies scripted verdicts to every pending item of `kind`.
pub fn auto_annotate(ws: &Workspace, rules: &AutoRules, kind: ItemKind) -> Result<usize> {
    let mut store = ws.open_screening(vec![])?;
    Ok(store.apply_auto_annotator(rules, kind)?)
}

/// Finalizes screening of `kind` and writes the resulting statuses back to
/// `memories.jsonl` or (after the pair gate) `queries.jsonl`.
pub fn finalize(ws: &Workspace, kind: ItemKind, required_annotators: usize, roster: Vec<String>) -> Result<ScreeningReport> {
    let store = ws.open_screening(roster)?;
    let report = store.finalize_intersection(kind, required_annotators)?;
    let kept: std::collections::HashSet<&str> = report.kept_ids.iter().map(String::as_str).collect();
    let status = |id: &str| {
        if kept.contains(id) {
            ScreeningStatus::Kept
        } else {
            ScreeningStatus::Rejected
        }
    };
    match kind {
        ItemKind::Memory => {
            let mut memories = ws.load_memories()?;
            for m in &mut memories {
                m.screening_status = status(&m.memory_id);
            }
            jsonl::write(&ws.memories(), &memories)?;
        }
        ItemKind::QueryPair => {
            let mut queries = ws.load_queries()?;
            for q in &mut queries {
                q.screening_status = status(&q.query_id);
            }
            inject::apply_pair_gate(&mut queries);
            jsonl::write(&ws.queries(), &queries)?;
        }
    }
    write_json(&ws.screening().join(format!("report_{}.json", kind.as_str())), &report)?;
    Ok(report)
}

/// Drafts KKE and UKE false memories for every kept memory.
pub fn inject(
    ws: &Workspace,
    engine: &Engine,
    constructor: &str,
    registry: &SubDisciplineRegistry,
    seed: u64,
) -> Result<(Vec<InjectionDraft>, Vec<InjectFailure>)> {
    let endpoint = engine.endpoint(constructor, EndpointKind::Chat)?;
    let memories = ws.load_memories()?;
    let profiles = ws.profiles()?;
    let (drafts, failures) =
        inject::inject_all(&engine.provider, endpoint, &engine.templates, &profiles, &memories, registry, seed)?;
    jsonl::write(&ws.drafts(), &drafts)?;
    jsonl::write(&ws.inject_failures(), &failures)?;
    Ok((drafts, failures))
}

/// Rewrites drafts into questions and queues them for pair screening.
pub fn transform(
    ws: &Workspace,
    engine: &Engine,
    constructor: &str,
    interrogatives: &[&str],
) -> Result<(Vec<ErrorQuery>, Vec<InjectFailure>)> {
    let endpoint = engine.endpoint(constructor, EndpointKind::Chat)?;
    let drafts: Vec<InjectionDraft> = jsonl::read(&ws.drafts())?;
    let profiles = ws.profiles()?;
    let (queries, failures) =
        inject::transform_all(&engine.provider, endpoint, &engine.templates, &profiles, &drafts, interrogatives)?;
    jsonl::write(&ws.queries(), &queries)?;
    let mut all_failures: Vec<InjectFailure> = jsonl::read(&ws.inject_failures()).unwrap_or_default();
    all_failures.retain(|f| f.stage != "transform");
    all_failures.extend(failures.iter().cloned());
    jsonl::write(&ws.inject_failures(), &all_failures)?;
    let chunks = ws.load_chunks()?;
    let chunk_text: HashMap<&str, &str> = chunks.iter().map(|c| (c.chunk_id.as_str(), c.text.as_str())).collect();
    let mut store = ws.open_screening(vec![])?;
    store.add_items(
        queries
            .iter()
            .map(|q| ReviewItem::for_query(q, chunk_text[q.chunk_id.as_str()].trim())),
    )?;
    Ok((queries, failures))
}

/// Assembles `dataset.jsonl` from kept query pairs.
pub fn build_dataset(ws: &Workspace, templates: &TemplateSet, seed: u64) -> Result<ProbingDataset> {
    let queries = ws.load_queries()?;
    let memories = ws.load_memories()?;
    let chunks = ws.load_chunks()?;
    let profiles = ws.profiles()?;
    let ds = dataset::assemble(&queries, &memories, &chunks, &profiles, seed, templates.hashes())?;
    ds.check_invariants()?;
    ds.save(&ws.dataset())?;
    Ok(ds)
}

pub fn stats(dataset_path: &Path) -> Result<DatasetStats> {
    let ds = ProbingDataset::load(dataset_path)?;
    Ok(dataset::stats(&ds.records)?)
}

/// Embeds every character's chunks and saves one index per character.
pub fn embed_index(ws: &Workspace, engine: &Engine, embedder: &str) -> Result<BTreeMap<String, CorpusIndex>> {
    let endpoint = engine.endpoint(embedder, EndpointKind::Embedding)?;
    let chunks = ws.load_chunks()?;
    let mut out = BTreeMap::new();
    for p in ws.profiles()? {
        let index = retrieval::build_index(&engine.provider, endpoint, &p.character_id, &chunks)?;
        index.save(&ws.index(&p.character_id))?;
        out.insert(p.character_id.clone(), index);
    }
    Ok(out)
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub strategy: StrategySpec,
    pub responder: ModelEndpoint,
    pub embedder: Option<ModelEndpoint>,
    pub trials: u32,
    pub seed: u64,
    pub dataset: String,
    pub dataset_sha256: String,
    pub n_records: usize,
    pub n_responses: usize,
    pub n_failures: usize,
    pub template_hashes: BTreeMap<String, String>,
}

pub struct RunRequest<'a> {
    pub run_id: &'a str,
    pub dataset_path: &'a Path,
    pub spec: StrategySpec,
    pub embedder: Option<&'a str>,
    pub case_bank: Option<&'a CaseBank>,
    pub trials: u32,
    pub seed: u64,
}

fn load_indexes(ws: &Workspace, ds: &ProbingDataset) -> Result<BTreeMap<String, CorpusIndex>> {
    let mut indexes = BTreeMap::new();
    for c in &ds.characters {
        let path = ws.index(&c.character_id);
        if path.exists() {
            indexes.insert(c.character_id.clone(), CorpusIndex::load(&path)?);
        }
    }
    Ok(indexes)
}

/// Runs one strategy over a dataset and writes the run directory.
pub fn run(ws: &Workspace, engine: &Engine, req: &RunRequest<'_>) -> Result<(Vec<DetectionRecord>, Vec<RunFailure>)> {
    let responder = engine.endpoint(&req.spec.responder, EndpointKind::Chat)?;
    let embedder = req
        .embedder
        .map(|id| engine.endpoint(id, EndpointKind::Embedding))
        .transpose()?;
    let ds = ProbingDataset::load(req.dataset_path)?;
    let run_dir = ws.run(req.run_id);
    let _lock = DirLock::acquire(run_dir.root())?;
    let indexes = if req.spec.kind.needs_index() {
        load_indexes(ws, &ds)?
    } else {
        BTreeMap::new()
    };
    let chunk_texts: HashMap<String, String> = if req.spec.kind.needs_index() {
        ws.load_chunks()?.into_iter().map(|c| (c.chunk_id, c.text)).collect()
    } else {
        HashMap::new()
    };
    let narratives = NarrativeCache::new();
    let ctx = StrategyContext {
        provider: &engine.provider,
        templates: &engine.templates,
        responder,
        embedder,
        case_bank: req.case_bank,
        indexes: &indexes,
        chunk_texts: &chunk_texts,
        narratives: &narratives,
        characters: &ds.characters,
    };
    let (records, failures) = strategies::run_all(&ctx, &req.spec, &ds.records, req.trials, engine.workers)?;
    jsonl::write(&run_dir.responses(), &records)?;
    jsonl::write(&run_dir.failures(), &failures)?;
    jsonl::write(&run_dir.narratives(), &narratives.all())?;
    let dataset_bytes = fs::read(req.dataset_path).map_err(Error::io(req.dataset_path))?;
    write_json(
        &run_dir.manifest(),
        &RunManifest {
            run_id: req.run_id.to_string(),
            strategy: req.spec.clone(),
            responder: responder.clone(),
            embedder: embedder.cloned(),
            trials: req.trials,
            seed: req.seed,
            dataset: req.dataset_path.display().to_string(),
            dataset_sha256: crate::text::sha256_hex(&dataset_bytes),
            n_records: ds.records.len(),
            n_responses: records.len(),
            n_failures: failures.len(),
            template_hashes: engine.templates.hashes(),
        },
    )?;
    Ok((records, failures))
}

/// Judge configuration and verdict summary for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub judge: ModelEndpoint,
    pub trials: u32,
    pub verdicts: BTreeMap<String, usize>,
    pub score: ScoreTable,
}

/// Judges a run's responses and scores them.
pub fn judge_run(ws: &Workspace, engine: &Engine, run_id: &str, judge_id: &str) -> Result<(Vec<Judgment>, ScoreTable)> {
    let judge_ep = engine.endpoint(judge_id, EndpointKind::Chat)?;
    let run_dir = ws.run(run_id);
    let _lock = DirLock::acquire(run_dir.root())?;
    let manifest = run_dir.load_manifest()?;
    if manifest.responder.id == judge_id || manifest.responder.model_name == judge_ep.model_name {
        log::warn!("judge '{judge_id}' is the same model as the responder; scores may carry self-bias");
    }
    let ds = ProbingDataset::load(Path::new(&manifest.dataset))?;
    let records: Vec<DetectionRecord> = jsonl::read(&run_dir.responses())?;
    let failures: Vec<RunFailure> = jsonl::read(&run_dir.failures())?;
    let judgments = judge::judge_all(&engine.provider, judge_ep, &engine.templates, &ds, &records, &failures, engine.workers)?;
    jsonl::write(&run_dir.judgments(), &judgments)?;
    let table = judge::score(&judgments, &ds.records, manifest.trials)?;
    write_json(
        &run_dir.score(),
        &JudgeSummary {
            judge: judge_ep.clone(),
            trials: manifest.trials,
            verdicts: judge::verdict_counts(&judgments)
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            score: table.clone(),
        },
    )?;
    Ok((judgments, table))
}

/// Renders the scores of several runs.
pub fn report(ws: &Workspace, run_ids: &[String], format: ReportFormat, layout: Layout, with_stats: bool) -> Result<ReportDoc> {
    let mut rows = Vec::new();
    let mut stats = None;
    for id in run_ids {
        let run_dir = ws.run(id);
        let manifest = run_dir.load_manifest()?;
        let summary: JudgeSummary = Workspace::read_json(&run_dir.score())?;
        if with_stats && stats.is_none() {
            stats = Some(self::stats(Path::new(&manifest.dataset))?);
        }
        rows.push(ReportRow {
            run_id: id.clone(),
            model: manifest.responder.model_name.clone(),
            strategy: manifest.strategy.kind.title().to_string(),
            table: summary.score,
        });
    }
    Ok(report::render(&rows, stats.as_ref(), format, layout)?)
}
