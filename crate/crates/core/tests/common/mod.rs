//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use rolecheck_core::inject::{SubDisciplineRegistry, DEFAULT_INTERROGATIVES};
use rolecheck_core::pipeline::{self, Engine, RunRequest, Workspace};
use rolecheck_core::prompts::TemplateSet;
use rolecheck_core::provider::mock::MockBackend;
use rolecheck_core::provider::{ModelEndpoint, Provider};
use rolecheck_core::screening::{AutoRules, ItemKind};
use rolecheck_core::strategies::{CaseBank, StrategyKind, StrategySpec};
use rolecheck_core::{ErrorType, MemoryCategory};

pub fn tests_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests")
}

pub fn e2e_dir() -> PathBuf {
    tests_dir().join("fixtures/e2e")
}

#[derive(Deserialize)]
pub struct Inputs {
    pub role_name: String,
    pub memory_chunk: String,
    pub correct_memory: String,
    pub topic1: String,
    pub topic2: String,
    pub manipulate_memory: String,
    pub given_query: String,
    pub given_response: String,
    pub self_response: String,
    pub rag_chunks: Vec<String>,
    pub self_narrative: String,
    pub self_doubt: String,
}

pub fn inputs() -> Inputs {
    serde_json::from_str(&std::fs::read_to_string(tests_dir().join("golden/inputs.json")).unwrap()).unwrap()
}

pub fn golden(name: &str) -> String {
    let path = tests_dir().join("golden").join(format!("{name}.golden"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn case_bank() -> CaseBank {
    CaseBank::load(&e2e_dir().join("cases.json")).unwrap()
}

/// Every template assembled from the fixture inputs, keyed by golden name.
pub fn assemble_all(t: &TemplateSet) -> Vec<(String, String)> {
    let inp = inputs();
    let r = inp.role_name.as_str();
    let bank = case_bank();
    let blocks = bank.blocks();
    let rag = inp.rag_chunks.join("\n\n");
    let q = inp.given_query.as_str();
    let mut out = vec![("memgen".to_string(), t.memgen(r, &inp.memory_chunk).unwrap())];
    for cat in MemoryCategory::ALL {
        out.push((
            format!("kke_inject_{}", cat.as_str()),
            t.kke_inject(r, cat, &inp.correct_memory).unwrap(),
        ));
        out.push((
            format!("uke_inject_{}", cat.as_str()),
            t.uke_inject(r, cat, &inp.correct_memory, &inp.topic1, &inp.topic2).unwrap(),
        ));
    }
    out.push(("to_question".into(), t.to_question(r, &inp.manipulate_memory).unwrap()));
    out.push((
        "judge_kke".into(),
        t.judge(ErrorType::Kke, r, &inp.correct_memory, q, &inp.given_response).unwrap(),
    ));
    out.push((
        "judge_uke".into(),
        t.judge(ErrorType::Uke, r, &inp.correct_memory, q, &inp.given_response).unwrap(),
    ));
    out.push(("vanilla".into(), t.vanilla(r, q).unwrap()));
    out.push(("cot".into(), t.cot(r, q).unwrap()));
    out.push(("few_shot".into(), t.few_shot(r, &blocks, q).unwrap()));
    out.push(("rag".into(), t.rag(r, &rag, q).unwrap()));
    out.push(("rag_few_shot".into(), t.rag_few_shot(r, &rag, &blocks, q).unwrap()));
    out.push(("self_reflection".into(), t.self_reflection(r, &inp.self_response, q).unwrap()));
    out.push(("s2rd_narrative".into(), t.s2rd_narrative(r).unwrap()));
    out.push((
        "s2rd_recollection".into(),
        t.s2rd_recollection(r, &inp.self_narrative, q).unwrap(),
    ));
    out.push(("s2rd_doubt".into(), t.s2rd_doubt(r, &inp.self_narrative, &rag, q).unwrap()));
    out.push((
        "s2rd_final".into(),
        t.s2rd_final(r, &inp.self_narrative, &rag, &bank.joined(), &inp.self_doubt, q)
            .unwrap(),
    ));
    out
}

/// Engine over the fixture mock script.
pub fn mock_engine(workers: usize) -> Engine {
    let mock = MockBackend::from_file(&e2e_dir().join("mock.json")).unwrap();
    let endpoints: BTreeMap<String, ModelEndpoint> = [
        ModelEndpoint::chat("constructor", "mock://", "mock-constructor"),
        ModelEndpoint::chat("responder", "mock://", "mock-responder"),
        ModelEndpoint::chat("judge", "mock://", "mock-judge"),
        ModelEndpoint::embedding("embedder", "mock://", "mock-embedder"),
    ]
    .into_iter()
    .map(|e| (e.id.clone(), e))
    .collect();
    Engine {
        provider: Provider::new(Arc::new(mock)),
        templates: TemplateSet::default(),
        endpoints,
        workers,
    }
}

/// Runs construction through dataset assembly in `root`, scripting every
/// screening round with `annotators` (a rules file in the e2e fixtures).
pub fn build_fixture_dataset(root: &Path, engine: &Engine, annotators: &str, seed: u64) -> Workspace {
    let ws = Workspace::new(root);
    let dir = e2e_dir();
    pipeline::ingest(&ws, &[(dir.join("beethoven.json"), None), (dir.join("holmes.json"), None)]).unwrap();
    pipeline::chunk(&ws, 8).unwrap();
    pipeline::gen_memories(&ws, engine, "constructor").unwrap();
    let rules = AutoRules::load(&dir.join(annotators)).unwrap();
    pipeline::auto_annotate(&ws, &rules, ItemKind::Memory).unwrap();
    pipeline::finalize(&ws, ItemKind::Memory, 3, rules.annotators.clone()).unwrap();
    pipeline::inject(&ws, engine, "constructor", &SubDisciplineRegistry::default(), seed).unwrap();
    pipeline::transform(&ws, engine, "constructor", DEFAULT_INTERROGATIVES).unwrap();
    pipeline::auto_annotate(&ws, &rules, ItemKind::QueryPair).unwrap();
    pipeline::finalize(&ws, ItemKind::QueryPair, 3, rules.annotators.clone()).unwrap();
    pipeline::build_dataset(&ws, &engine.templates, seed).unwrap();
    ws
}

/// Full run: dataset, index, one strategy run and its judgments.
pub fn full_run(root: &Path, kind: StrategyKind, trials: u32, seed: u64) -> Workspace {
    let engine = mock_engine(4);
    let ws = build_fixture_dataset(root, &engine, "annotators.json", seed);
    pipeline::embed_index(&ws, &engine, "embedder").unwrap();
    let bank = case_bank();
    let run_id = format!("{}-responder", kind.as_str());
    let dataset = ws.dataset();
    pipeline::run(
        &ws,
        &engine,
        &RunRequest {
            run_id: &run_id,
            dataset_path: &dataset,
            spec: StrategySpec::new(kind, "responder"),
            embedder: Some("embedder"),
            case_bank: Some(&bank),
            trials,
            seed,
        },
    )
    .unwrap();
    pipeline::judge_run(&ws, &engine, &run_id, "judge").unwrap();
    ws
}
