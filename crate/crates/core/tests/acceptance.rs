//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion with its
//! wall-clock time against the budget, and exits non-zero if any criterion
//! fails or runs over budget.
//!
//! The live smoke criterion runs only when `ROLECHECK_LIVE_BASE_URL` and
//! `ROLECHECK_LIVE_CHAT_MODEL` are set (see `live_smoke`).

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rolecheck_core::corpus::{self, CharacterProfile, Chunk};
use rolecheck_core::dataset::{self, DatasetRecord, ProbingDataset};
use rolecheck_core::inject::{self, ErrorQuery};
use rolecheck_core::judge::{self, parse_judgment, Judgment, ScoreTable, Verdict};
use rolecheck_core::pipeline::Workspace;
use rolecheck_core::prompts::{placeholders, TemplateSet};
use rolecheck_core::provider::http::HttpBackend;
use rolecheck_core::provider::mock::{Matcher, MockBackend, MockCall, MockOutcome, MockScript};
use rolecheck_core::provider::{ModelEndpoint, Provider};
use rolecheck_core::report;
use rolecheck_core::retrieval::{self, CorpusIndex};
use rolecheck_core::strategies::{self, NarrativeCache, StrategyContext, StrategyKind, StrategySpec};
use rolecheck_core::{ErrorType, MemoryCategory, ScreeningStatus};

enum Outcome {
    Pass(String),
    Skip(String),
}

type Check = fn() -> Result<Outcome, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    }};
}

fn main() {
    let criteria: [(&str, u64, Check); 8] = [
        ("prompt golden suite", 5, prompt_golden_suite),
        ("pipeline determinism", 30, pipeline_determinism),
        ("retrieval oracle", 10, retrieval_oracle),
        ("scoring oracle", 5, scoring_oracle),
        ("dataset invariants", 5, dataset_invariants),
        ("S2RD call protocol", 10, s2rd_call_protocol),
        ("judge parser", 5, judge_parser),
        ("live smoke", 120, live_smoke),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(budget);
        let timing = format!("{:.2}s / budget {budget}s", elapsed.as_secs_f64());
        match result {
            Ok(Outcome::Pass(detail)) if !over => println!("PASS  {name:<22} [{timing}] {detail}"),
            Ok(Outcome::Pass(detail)) => {
                failed += 1;
                println!("FAIL  {name:<22} [{timing}] over budget; {detail}");
            }
            Ok(Outcome::Skip(why)) => println!("SKIP  {name:<22} [{timing}] {why}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<22} [{timing}] {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------

fn prompt_golden_suite() -> Result<Outcome, String> {
    let t = TemplateSet::default();
    let assembled = common::assemble_all(&t);
    for (name, text) in &assembled {
        ensure!(*text == common::golden(name), "{name} differs from its golden file");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x901d);
    let alphabet: Vec<char> = "abcXYZ 019.,;:'?!\n\u{e9}\u{4e2d}-".chars().collect();
    let word = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.random_range(0..60);
        (0..n).map(|_| *alphabet.choose(rng).unwrap()).collect()
    };
    let mut unfilled = 0;
    for _ in 0..1000 {
        let v: Vec<String> = (0..8).map(|_| word(&mut rng)).collect();
        let cat = MemoryCategory::ALL[rng.random_range(0..4)];
        let cases = [v[4].clone(), v[5].clone(), v[6].clone(), v[7].clone()];
        let out = match rng.random_range(0..16) {
            0 => t.memgen(&v[0], &v[1]),
            1 => t.kke_inject(&v[0], cat, &v[1]),
            2 => t.uke_inject(&v[0], cat, &v[1], &v[2], &v[3]),
            3 => t.to_question(&v[0], &v[1]),
            4 => t.judge(ErrorType::Kke, &v[0], &v[1], &v[2], &v[3]),
            5 => t.judge(ErrorType::Uke, &v[0], &v[1], &v[2], &v[3]),
            6 => t.vanilla(&v[0], &v[1]),
            7 => t.cot(&v[0], &v[1]),
            8 => t.few_shot(&v[0], &cases, &v[1]),
            9 => t.rag(&v[0], &v[1], &v[2]),
            10 => t.rag_few_shot(&v[0], &v[1], &cases, &v[2]),
            11 => t.self_reflection(&v[0], &v[1], &v[2]),
            12 => t.s2rd_narrative(&v[0]),
            13 => t.s2rd_recollection(&v[0], &v[1], &v[2]),
            14 => t.s2rd_doubt(&v[0], &v[1], &v[2], &v[3]),
            _ => t.s2rd_final(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5]),
        }
        .map_err(|e| e.to_string())?;
        if !placeholders(&out).is_empty() || out.contains('{') {
            unfilled += 1;
        }
    }
    ensure!(unfilled == 0, "{unfilled} of 1000 fuzzed assemblies left a placeholder");
    Ok(Outcome::Pass(format!(
        "{} goldens byte-exact; 0/1000 fuzzed assemblies with unfilled placeholders",
        assembled.len()
    )))
}

// ---------------------------------------------------------------------------

fn pipeline_determinism() -> Result<Outcome, String> {
    let files = |ws: &Workspace| -> Vec<(String, Vec<u8>)> {
        let run = ws.run("s2rd-responder");
        [ws.dataset(), run.responses(), run.judgments()]
            .into_iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ws_a = common::full_run(a.path(), StrategyKind::S2rd, 3, 7);
    let ws_b = common::full_run(b.path(), StrategyKind::S2rd, 3, 7);
    let (fa, fb) = (files(&ws_a), files(&ws_b));
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        ensure!(x == y, "{name} differs between two seed-7 runs");
        ensure!(!x.is_empty(), "{name} is empty");
    }
    let ds = ProbingDataset::load(&ws_a.dataset()).map_err(|e| e.to_string())?;
    let mut per_char: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in &ds.records {
        per_char.entry(&r.character_id).or_default().insert(&r.memory_id);
    }
    let sizes: Vec<usize> = per_char.values().map(|s| s.len()).collect();
    ensure!(sizes == vec![10, 10], "expected 2 characters x 10 memories, got {sizes:?}");

    // The seed matters: another seed draws other UKE topics.
    let c = tempfile::tempdir().unwrap();
    common::build_fixture_dataset(c.path(), &common::mock_engine(4), "annotators.json", 8);
    let other = std::fs::read(Workspace::new(c.path()).dataset()).unwrap();
    ensure!(other != fa[0].1, "seed 8 produced the same dataset as seed 7");
    Ok(Outcome::Pass(format!(
        "dataset.jsonl ({} B), responses.jsonl ({} B), judgments.jsonl ({} B) identical across two runs; 2x10 memories",
        fa[0].1.len(),
        fa[1].1.len(),
        fa[2].1.len()
    )))
}

// ---------------------------------------------------------------------------

/// Exact comparison of `dot_a/sqrt(na)` against `dot_b/sqrt(nb)` for integer
/// vectors (the query norm is a shared positive factor).
fn cmp_cosine(a: (i64, i64), b: (i64, i64)) -> std::cmp::Ordering {
    use std::cmp::Ordering::*;
    let ((da, na), (db, nb)) = (a, b);
    match (da.signum(), db.signum()) {
        (x, y) if x != y => x.cmp(&y),
        (0, _) => Equal,
        (s, _) => {
            let lhs = (da as i128) * (da as i128) * (nb as i128);
            let rhs = (db as i128) * (db as i128) * (na as i128);
            if s > 0 {
                lhs.cmp(&rhs)
            } else {
                rhs.cmp(&lhs)
            }
        }
    }
}

fn retrieval_oracle() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ea);
    let mut ties_seen = 0;
    for instance in 0..200 {
        let dim = rng.random_range(1..=16);
        let n = rng.random_range(1..=50);
        let nonzero = |rng: &mut ChaCha8Rng| loop {
            let v: Vec<i64> = (0..dim).map(|_| rng.random_range(-3..=3)).collect();
            if v.iter().any(|&x| x != 0) {
                return v;
            }
        };
        let mut ids: Vec<String> = (0..n).map(|i| format!("d{i:03}")).collect();
        ids.shuffle(&mut rng);
        let mut docs: Vec<(String, Vec<i64>)> = Vec::new();
        for id in ids {
            let v = if !docs.is_empty() && rng.random_bool(0.25) {
                // An exact duplicate or a scaled copy: equal similarity.
                let (_, base) = docs.choose(&mut rng).unwrap();
                let s = rng.random_range(1..=3);
                base.iter().map(|x| x * s).collect()
            } else {
                nonzero(&mut rng)
            };
            docs.push((id, v));
        }
        let query = if rng.random_bool(0.2) {
            docs.choose(&mut rng).unwrap().1.clone()
        } else {
            nonzero(&mut rng)
        };
        let k = rng.random_range(1..=n + 2);

        let index = CorpusIndex::from_vectors(
            "c",
            docs.iter()
                .map(|(id, v)| (id.clone(), v.iter().map(|&x| x as f32).collect()))
                .collect(),
        )
        .map_err(|e| e.to_string())?;
        let qf: Vec<f32> = query.iter().map(|&x| x as f32).collect();
        let hits = index.search_vector(&qf, k).map_err(|e| e.to_string())?;

        let qn: i64 = query.iter().map(|x| x * x).sum();
        let mut oracle: Vec<(String, (i64, i64))> = docs
            .iter()
            .map(|(id, v)| {
                let dot: i64 = v.iter().zip(&query).map(|(a, b)| a * b).sum();
                let nn: i64 = v.iter().map(|x| x * x).sum();
                (id.clone(), (dot, nn))
            })
            .collect();
        oracle.sort_by(|a, b| cmp_cosine(b.1, a.1).then_with(|| a.0.cmp(&b.0)));
        ties_seen += oracle
            .windows(2)
            .filter(|w| cmp_cosine(w[0].1, w[1].1).is_eq())
            .count();
        oracle.truncate(k);

        let got: Vec<&str> = hits.iter().map(|h| h.chunk_id.as_str()).collect();
        let want: Vec<&str> = oracle.iter().map(|(id, _)| id.as_str()).collect();
        ensure!(got == want, "instance {instance}: ranking {got:?} != oracle {want:?}");
        for (h, (_, (dot, nn))) in hits.iter().zip(&oracle) {
            let exact = *dot as f64 / ((*nn as f64) * (qn as f64)).sqrt();
            ensure!((h.score - exact).abs() < 1e-12, "instance {instance}: score {} != {exact}", h.score);
        }
    }
    Ok(Outcome::Pass(format!(
        "200/200 instances match the exact ranking ({ties_seen} tied neighbours resolved by chunk id)"
    )))
}

// ---------------------------------------------------------------------------

fn synthetic_record(i: usize, et: ErrorType, cat: MemoryCategory) -> DatasetRecord {
    DatasetRecord {
        query_id: format!("q{i:04}-{}", et.as_str()),
        character_id: "c".into(),
        memory_id: format!("q{i:04}"),
        chunk_id: "c-c000".into(),
        memory_category: cat,
        error_type: et,
        query: "Were you there?".into(),
        source_memory: "I was there.".into(),
        false_memory: "I was elsewhere.".into(),
        explanation: String::new(),
        topics: vec![],
    }
}

fn judgment(query_id: &str, trial: u32, verdict: Verdict) -> Judgment {
    Judgment {
        query_id: query_id.to_string(),
        trial_index: trial,
        verdict,
        judge_explanation: String::new(),
        raw_text: String::new(),
        attempts: 1,
        warnings: vec![],
    }
}

fn random_set(rng: &mut ChaCha8Rng) -> (Vec<DatasetRecord>, Vec<Judgment>, u32) {
    let n = rng.random_range(1..=60);
    let trials = rng.random_range(1..=3);
    let records: Vec<DatasetRecord> = (0..n)
        .map(|i| {
            let et = ErrorType::ALL[rng.random_range(0..2)];
            let cat = MemoryCategory::ALL[rng.random_range(0..4)];
            synthetic_record(i, et, cat)
        })
        .collect();
    let judgments = records
        .iter()
        .flat_map(|r| (0..trials).map(move |t| (r.query_id.clone(), t)))
        .map(|(q, t)| {
            let v = match rng.random_range(0..10) {
                0..=4 => Verdict::Yes,
                5..=8 => Verdict::No,
                _ => Verdict::Invalid,
            };
            judgment(&q, t, v)
        })
        .collect();
    (records, judgments, trials)
}

/// Independent recount: (per-trial accuracies, mean, sem) for items matching
/// the filter.
fn recount(
    records: &[DatasetRecord],
    judgments: &[Judgment],
    trials: u32,
    keep: impl Fn(&DatasetRecord) -> bool,
) -> (Vec<f64>, f64, f64) {
    let members: HashSet<&str> = records.iter().filter(|r| keep(r)).map(|r| r.query_id.as_str()).collect();
    let accs: Vec<f64> = (0..trials)
        .map(|t| {
            if members.is_empty() {
                return 0.0;
            }
            let yes = judgments
                .iter()
                .filter(|j| j.trial_index == t && members.contains(j.query_id.as_str()) && j.verdict == Verdict::Yes)
                .count();
            yes as f64 / members.len() as f64
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let sem = if accs.len() < 2 {
        0.0
    } else {
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (accs.len() - 1) as f64;
        (var / accs.len() as f64).sqrt()
    };
    (accs, mean, sem)
}

fn check_table(table: &ScoreTable, records: &[DatasetRecord], judgments: &[Judgment], trials: u32) -> Result<(), String> {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let compare = |label: String, cell: &judge::ScoreCell, want: (Vec<f64>, f64, f64)| -> Result<(), String> {
        ensure!(cell.trial_accuracies.len() == want.0.len(), "{label}: trial count");
        for (a, b) in cell.trial_accuracies.iter().zip(&want.0) {
            ensure!(close(*a, *b), "{label}: trial accuracy {a} != {b}");
        }
        ensure!(close(cell.accuracy_mean, want.1), "{label}: mean {} != {}", cell.accuracy_mean, want.1);
        ensure!(close(cell.sem, want.2), "{label}: sem {} != {}", cell.sem, want.2);
        Ok(())
    };
    for et in ErrorType::ALL {
        for cat in MemoryCategory::ALL {
            let want = recount(records, judgments, trials, |r| r.error_type == et && r.memory_category == cat);
            compare(format!("{et:?}/{cat:?}"), table.cell(et, cat), want)?;
        }
        let want = recount(records, judgments, trials, |r| r.error_type == et);
        compare(format!("{et:?} avg"), table.average(et), want)?;
    }
    compare("overall".into(), &table.overall, recount(records, judgments, trials, |_| true))
}

fn scoring_oracle() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5c0);
    for set in 0..100 {
        let (records, judgments, trials) = random_set(&mut rng);
        let table = judge::score(&judgments, &records, trials).map_err(|e| e.to_string())?;
        check_table(&table, &records, &judgments, trials).map_err(|e| format!("set {set}: {e}"))?;
    }

    // 495 KKE items with 219 judged correct in each of three trials.
    let records: Vec<DatasetRecord> = (0..495)
        .map(|i| synthetic_record(i, ErrorType::Kke, MemoryCategory::ALL[i % 4]))
        .collect();
    let mut judgments = Vec::new();
    for t in 0..3u32 {
        let mut order: Vec<usize> = (0..495).collect();
        order.shuffle(&mut rng);
        let yes: HashSet<usize> = order[..219].iter().copied().collect();
        for (i, r) in records.iter().enumerate() {
            judgments.push(judgment(&r.query_id, t, if yes.contains(&i) { Verdict::Yes } else { Verdict::No }));
        }
    }
    let table = judge::score(&judgments, &records, 3).map_err(|e| e.to_string())?;
    let avg = table.average(ErrorType::Kke);
    let shown = report::format_cell(avg.accuracy_mean, avg.sem);
    ensure!(shown == "44.24±0.00", "219/495 cell renders as {shown}");

    // Ten items; 5, 6 and 7 correct in the three trials.
    let records: Vec<DatasetRecord> = (0..10)
        .map(|i| synthetic_record(i, ErrorType::Uke, MemoryCategory::Event))
        .collect();
    let mut judgments = Vec::new();
    for (t, correct) in [5usize, 6, 7].into_iter().enumerate() {
        for (i, r) in records.iter().enumerate() {
            judgments.push(judgment(&r.query_id, t as u32, if i < correct { Verdict::Yes } else { Verdict::No }));
        }
    }
    let table = judge::score(&judgments, &records, 3).map_err(|e| e.to_string())?;
    let sem = table.cell(ErrorType::Uke, MemoryCategory::Event).sem;
    ensure!((sem - 0.05774).abs() <= 1e-5, "SEM of {{0.5, 0.6, 0.7}} is {sem}");
    Ok(Outcome::Pass(format!(
        "100/100 random sets match the recount; 219/495 -> \"{shown}\"; SEM {{0.5,0.6,0.7}} = {sem:.5}"
    )))
}

// ---------------------------------------------------------------------------

fn recount_pairs(records: &[DatasetRecord]) -> Result<usize, String> {
    let mut per_memory: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut per_cat: BTreeMap<(MemoryCategory, ErrorType), usize> = BTreeMap::new();
    for r in records {
        let e = per_memory.entry(&r.memory_id).or_default();
        match r.error_type {
            ErrorType::Kke => e.0 += 1,
            ErrorType::Uke => e.1 += 1,
        }
        *per_cat.entry((r.memory_category, r.error_type)).or_default() += 1;
    }
    for (m, (k, u)) in &per_memory {
        ensure!((*k, *u) == (1, 1), "memory {m} has {k} KKE and {u} UKE queries");
    }
    for cat in MemoryCategory::ALL {
        let k = per_cat.get(&(cat, ErrorType::Kke)).copied().unwrap_or(0);
        let u = per_cat.get(&(cat, ErrorType::Uke)).copied().unwrap_or(0);
        ensure!(k == u, "{cat:?}: {k} KKE vs {u} UKE");
    }
    Ok(per_memory.len())
}

fn dataset_invariants() -> Result<Outcome, String> {
    use ScreeningStatus::*;
    // Pair gate truth table.
    let table = [
        (Kept, Kept, Kept),
        (Kept, Rejected, Rejected),
        (Rejected, Kept, Rejected),
        (Rejected, Rejected, Rejected),
        (Kept, Pending, Pending),
        (Pending, Rejected, Rejected),
    ];
    for (k, u, want) in table {
        ensure!(inject::pair_gate(k, u) == want, "pair_gate({k:?}, {u:?}) != {want:?}");
    }

    // Scripted screening: one annotator rejects a memory, another rejects the
    // UKE query of a different memory.
    let dir = tempfile::tempdir().unwrap();
    let engine = common::mock_engine(4);
    let ws = common::build_fixture_dataset(dir.path(), &engine, "annotators_strict.json", 7);
    let ds = ProbingDataset::load(&ws.dataset()).map_err(|e| e.to_string())?;
    ds.check_invariants().map_err(|e| e.to_string())?;
    let n_mem = recount_pairs(&ds.records)?;
    ensure!(n_mem == 18, "expected 18 memories after screening, got {n_mem}");
    ensure!(
        !ds.records.iter().any(|r| r.source_memory.contains("court orchestra")),
        "rejecting one query of a pair must drop both"
    );
    ensure!(
        !ds.records.iter().any(|r| r.source_memory.contains("slipper")),
        "a rejected memory must not yield queries"
    );

    // Random screening outcomes over the same queries.
    let queries: Vec<ErrorQuery> = ws.load_queries().map_err(|e| e.to_string())?;
    let memories = ws.load_memories().map_err(|e| e.to_string())?;
    let chunks = ws.load_chunks().map_err(|e| e.to_string())?;
    let profiles = ws.profiles().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xda7a);
    let statuses = [Kept, Kept, Kept, Rejected, Pending];
    let mut checked = 0;
    for _ in 0..100 {
        let mut qs = queries.clone();
        qs.shuffle(&mut rng);
        let drop = rng.random_range(0..3);
        qs.truncate(qs.len() - drop);
        for q in &mut qs {
            q.screening_status = *statuses.choose(&mut rng).unwrap();
        }
        let raw: HashMap<(String, ErrorType), ScreeningStatus> = qs
            .iter()
            .map(|q| ((q.memory_id.clone(), q.error_type), q.screening_status))
            .collect();
        inject::apply_pair_gate(&mut qs);
        let expected: BTreeSet<String> = memories
            .iter()
            .filter(|m| m.screening_status == Kept)
            .filter(|m| {
                raw.get(&(m.memory_id.clone(), ErrorType::Kke)) == Some(&Kept)
                    && raw.get(&(m.memory_id.clone(), ErrorType::Uke)) == Some(&Kept)
            })
            .map(|m| m.memory_id.clone())
            .collect();
        match dataset::assemble(&qs, &memories, &chunks, &profiles, 7, BTreeMap::new()) {
            Ok(ds) => {
                ds.check_invariants().map_err(|e| e.to_string())?;
                recount_pairs(&ds.records)?;
                let got: BTreeSet<String> = ds.records.iter().map(|r| r.memory_id.clone()).collect();
                ensure!(got == expected, "kept memories {got:?} != pair-gated {expected:?}");
            }
            Err(e) => ensure!(expected.is_empty(), "assemble failed with survivors: {e}"),
        }
        checked += 1;
    }
    Ok(Outcome::Pass(format!(
        "pair-gate table ok; scripted rejects drop whole pairs (18/20 memories kept); {checked}/100 random screenings hold 1 KKE + 1 UKE per memory"
    )))
}

// ---------------------------------------------------------------------------

fn s2rd_call_protocol() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x52d);
    let words = ["river", "court", "violin", "letter", "storm", "garden", "winter", "bridge", "candle", "harbor"];
    let mut total_records = 0;
    for run in 0..50 {
        let n_chars = rng.random_range(1..=3);
        let mut characters = Vec::new();
        let mut chunks = Vec::new();
        for c in 0..n_chars {
            let id = format!("char{c}");
            characters.push(CharacterProfile {
                character_id: id.clone(),
                name: format!("Person {c}"),
                persona_instruction: format!("I want you to act like Person {c}."),
                corpus_path: "x.txt".into(),
            });
            for i in 0..rng.random_range(1..=8) {
                let text: Vec<&str> = (0..6).map(|_| *words.choose(&mut rng).unwrap()).collect();
                chunks.push(Chunk {
                    chunk_id: format!("{id}-c{i:03}"),
                    character_id: id.clone(),
                    text: format!("{} {}.", characters[c].name, text.join(" ")),
                    sentence_count: 1,
                    ordinal: i,
                });
            }
        }
        let seeds = rng.random_range(3..=5);
        let recollection: Vec<String> = (0..seeds)
            .map(|i| format!("I remember the {} {i}.", words.choose(&mut rng).unwrap()))
            .collect();
        let script = MockScript::new()
            .on_regex(r"act like (?P<n>[^.]+)\.(?s:.*)Do you still remember who you are\?", "I am ${n}.")
            .on(
                Matcher::Regex("state three relevant true memories".into()),
                vec![MockOutcome::Reply(recollection.join("\n\n"))],
            )
            .on_regex("express your inner doubts", "This sounds wrong.")
            .on_regex("Answer this question to the questioner", "No, that is not so.")
            .hashed_embeddings(rng.random_range(4..=16));
        let mock = Arc::new(MockBackend::new(script).unwrap());
        let provider = Provider::new(mock.clone()).without_cache();
        let chat = ModelEndpoint::chat("r", "mock://", "m");
        let emb = ModelEndpoint::embedding("e", "mock://", "e");
        let mut indexes = BTreeMap::new();
        for c in &characters {
            let idx = retrieval::build_index(&provider, &emb, &c.character_id, &chunks).map_err(|e| e.to_string())?;
            indexes.insert(c.character_id.clone(), idx);
        }
        let chunk_texts: HashMap<String, String> = chunks.iter().map(|c| (c.chunk_id.clone(), c.text.clone())).collect();
        let records: Vec<DatasetRecord> = (0..rng.random_range(1..=8))
            .map(|i| {
                let c = rng.random_range(0..n_chars);
                let mut r = synthetic_record(i, ErrorType::ALL[i % 2], MemoryCategory::ALL[i % 4]);
                r.character_id = format!("char{c}");
                r.query = format!("Were you near the {} {i}?", words.choose(&mut rng).unwrap());
                r
            })
            .collect();
        let active: BTreeSet<&str> = records.iter().map(|r| r.character_id.as_str()).collect();
        let trials = rng.random_range(1..=2);
        let bank = common::case_bank();
        let narratives = NarrativeCache::new();
        let templates = TemplateSet::default();
        let ctx = StrategyContext {
            provider: &provider,
            templates: &templates,
            responder: &chat,
            embedder: Some(&emb),
            case_bank: Some(&bank),
            indexes: &indexes,
            chunk_texts: &chunk_texts,
            narratives: &narratives,
            characters: &characters,
        };
        let before = mock.calls().len();
        let spec = StrategySpec::new(StrategyKind::S2rd, "r");
        let (done, failed) =
            strategies::run_all(&ctx, &spec, &records, trials, rng.random_range(1..=4)).map_err(|e| e.to_string())?;
        ensure!(failed.is_empty(), "run {run}: {} failures", failed.len());
        ensure!(done.len() == records.len() * trials as usize, "run {run}: record count");
        for d in &done {
            ensure!(
                d.chat_calls() == 3 && d.embed_calls() == 3,
                "run {run} {}: {} chat + {} embed",
                d.query_id,
                d.chat_calls(),
                d.embed_calls()
            );
            let character = &records.iter().find(|r| r.query_id == d.query_id).unwrap().character_id;
            let own: HashSet<&str> = chunks
                .iter()
                .filter(|c| &c.character_id == character)
                .map(|c| c.chunk_id.as_str())
                .collect();
            let k_rec = d.trace.recollection_set.as_ref().ok_or("missing recollection set")?;
            ensure!(!k_rec.is_empty() && k_rec.len() <= 3, "run {run}: |K_rec| = {}", k_rec.len());
            for h in k_rec {
                ensure!(own.contains(h.chunk_id.as_str()), "run {run}: {} retrieved for {character}", h.chunk_id);
            }
        }
        let calls = &mock.calls()[before..];
        let narrative_calls = calls
            .iter()
            .filter(|c| matches!(c, MockCall::Chat { user_text, .. } if user_text.contains("Do you still remember who you are?")))
            .count();
        let chat_calls = calls.iter().filter(|c| matches!(c, MockCall::Chat { .. })).count();
        let embed_calls = calls.iter().filter(|c| matches!(c, MockCall::Embed { .. })).count();
        let n = done.len();
        ensure!(narrative_calls == active.len(), "run {run}: {narrative_calls} narrative calls for {} characters", active.len());
        ensure!(narratives.all().len() == active.len(), "run {run}: narrative cache size");
        ensure!(chat_calls == 3 * n + active.len(), "run {run}: {chat_calls} chat calls for {n} records");
        ensure!(embed_calls == 3 * n, "run {run}: {embed_calls} embed calls for {n} records");
        total_records += n;
    }
    Ok(Outcome::Pass(format!(
        "50/50 fuzzed runs ({total_records} records): 3 chat + 3 embed per record, 1 narrative per character, K_rec within own corpus"
    )))
}

// ---------------------------------------------------------------------------

fn judge_parser() -> Result<Outcome, String> {
    let table: &[(&str, Option<Verdict>, bool)] = &[
        ("explanation: The response corrects it.\n\njudgment: yes", Some(Verdict::Yes), false),
        ("Explanation: It does not.\n\nJudgment: No", Some(Verdict::No), false),
        ("EXPLANATION: fine\n\nJUDGMENT: YES", Some(Verdict::Yes), false),
        ("explanation: fine\njudgement: no", Some(Verdict::No), false),
        ("**Explanation:** fine\n\n**Judgment:** yes", Some(Verdict::Yes), false),
        ("explanation: fine\n\n## Judgment: No.", Some(Verdict::No), false),
        ("explanation: fine\n\njudgment：yes", Some(Verdict::Yes), false),
        ("explanation: fine\n\n  judgment:   yes  ", Some(Verdict::Yes), false),
        ("judgment: yes", Some(Verdict::Yes), true),
        ("The character clearly noticed.\n\nJudgment: yes", Some(Verdict::Yes), true),
        ("explanation: first judgment: no was wrong\n\njudgment: yes", Some(Verdict::Yes), false),
        ("explanation: x\n\njudgment: no\n\njudgment: yes", Some(Verdict::Yes), false),
        ("explanation: I cannot decide.", None, false),
        ("yes", None, false),
        ("judgment: maybe", None, false),
        ("", None, false),
    ];
    for (text, want, missing) in table {
        let got = parse_judgment(text);
        ensure!(got.as_ref().map(|p| p.verdict) == *want, "{text:?}: got {:?}", got.map(|p| p.verdict));
        if let Some(p) = got {
            let flagged = p.warnings.iter().any(|w| w == judge::WARN_MISSING_EXPLANATION);
            ensure!(flagged == *missing, "{text:?}: missing-explanation warning = {flagged}");
        }
    }

    // Three unparseable replies -> Invalid; a late valid reply is accepted.
    let t = TemplateSet::default();
    let entry = synthetic_record(0, ErrorType::Kke, MemoryCategory::Event);
    let response = rolecheck_core::strategies::DetectionRecord {
        query_id: entry.query_id.clone(),
        strategy: StrategyKind::Vanilla,
        responder: "r".into(),
        trial_index: 0,
        response_text: "No, I was elsewhere.".into(),
        trace: Default::default(),
        call_log: vec![],
    };
    let judge_ep = ModelEndpoint::chat("j", "mock://", "j");
    let gib = |n: usize, last: Option<&str>| {
        let mut outcomes = vec![MockOutcome::Reply("lorem ipsum".into()); n];
        if let Some(l) = last {
            outcomes.push(MockOutcome::Reply(l.into()));
        }
        Provider::new(Arc::new(
            MockBackend::new(MockScript::new().on(Matcher::Regex(".".into()), outcomes)).unwrap(),
        ))
    };
    let j = judge::judge_record(&gib(3, None), &judge_ep, &t, "Someone", &entry, &response).map_err(|e| e.to_string())?;
    ensure!(j.verdict == Verdict::Invalid && j.attempts == 3, "gibberish x3 gave {:?} after {}", j.verdict, j.attempts);
    let j = judge::judge_record(&gib(2, Some("explanation: ok\n\njudgment: yes")), &judge_ep, &t, "Someone", &entry, &response)
        .map_err(|e| e.to_string())?;
    ensure!(j.verdict == Verdict::Yes && j.attempts == 3, "gibberish x2 then valid gave {:?}", j.verdict);

    // Turning any verdict into Invalid never raises any accuracy.
    let mut rng = ChaCha8Rng::seed_from_u64(0x3070);
    let cells = |t: &ScoreTable| -> Vec<(String, Vec<f64>, f64)> {
        t.cells
            .iter()
            .chain(&t.averages)
            .chain(std::iter::once(&t.overall))
            .map(|c| (format!("{:?}/{:?}", c.error_type, c.category), c.trial_accuracies.clone(), c.accuracy_mean))
            .collect()
    };
    let mut strictly_lower = 0;
    for m in 0..100 {
        let (records, mut judgments, trials) = random_set(&mut rng);
        let before = judge::score(&judgments, &records, trials).map_err(|e| e.to_string())?;
        let i = rng.random_range(0..judgments.len());
        let was = judgments[i].verdict;
        judgments[i].verdict = Verdict::Invalid;
        let after = judge::score(&judgments, &records, trials).map_err(|e| e.to_string())?;
        for ((label, b_trials, b_mean), (_, a_trials, a_mean)) in cells(&before).into_iter().zip(cells(&after)) {
            ensure!(a_mean <= b_mean, "mutation {m}: {label} rose from {b_mean} to {a_mean}");
            for (a, b) in a_trials.iter().zip(&b_trials) {
                ensure!(a <= b, "mutation {m}: {label} trial accuracy rose");
            }
        }
        if was == Verdict::Yes {
            ensure!(after.overall.accuracy_mean < before.overall.accuracy_mean, "mutation {m}: Yes->Invalid did not lower overall");
            strictly_lower += 1;
        }
    }
    Ok(Outcome::Pass(format!(
        "{}/{} tolerance cases; gibberish x3 -> invalid; 100/100 mutations monotone ({strictly_lower} strictly lower)",
        table.len(),
        table.len()
    )))
}

// ---------------------------------------------------------------------------

/// Needs `ROLECHECK_LIVE_BASE_URL` and `ROLECHECK_LIVE_CHAT_MODEL`; optional
/// `ROLECHECK_LIVE_EMBED_MODEL` (default `text-embedding-3-small`) and
/// `ROLECHECK_LIVE_JUDGE_MODEL` (default: the chat model). The key comes from
/// `ROLECHECK_API_KEY` as for any endpoint.
fn live_smoke() -> Result<Outcome, String> {
    let (Ok(base), Ok(model)) = (
        std::env::var("ROLECHECK_LIVE_BASE_URL"),
        std::env::var("ROLECHECK_LIVE_CHAT_MODEL"),
    ) else {
        return Ok(Outcome::Skip("set ROLECHECK_LIVE_BASE_URL and ROLECHECK_LIVE_CHAT_MODEL to run".into()));
    };
    let embed_model = std::env::var("ROLECHECK_LIVE_EMBED_MODEL").unwrap_or_else(|_| "text-embedding-3-small".into());
    let judge_model = std::env::var("ROLECHECK_LIVE_JUDGE_MODEL").unwrap_or_else(|_| model.clone());
    let chat = ModelEndpoint::chat("live-chat", &base, &model);
    let judge_ep = ModelEndpoint::chat("live-judge", &base, &judge_model);
    let emb = ModelEndpoint::embedding("live-embed", &base, &embed_model);
    let backend = HttpBackend::new(Duration::from_secs(60)).map_err(|e| e.to_string())?;
    let provider = Provider::new(Arc::new(backend));

    let dir = common::tests_dir().join("fixtures/live");
    let character = corpus::ingest_character(&dir.join("beethoven_short.json"), None).map_err(|e| e.to_string())?;
    let chunks = corpus::chunk(&character, 3).map_err(|e| e.to_string())?;
    ensure!(chunks.len() == 5, "live fixture should chunk into 5, got {}", chunks.len());
    let index = retrieval::build_index(&provider, &emb, "beethoven", &chunks).map_err(|e| e.to_string())?;
    let indexes: BTreeMap<String, CorpusIndex> = [("beethoven".to_string(), index)].into();
    let chunk_texts: HashMap<String, String> = chunks.iter().map(|c| (c.chunk_id.clone(), c.text.clone())).collect();
    let mut entry = synthetic_record(0, ErrorType::Kke, MemoryCategory::Event);
    entry.character_id = "beethoven".into();
    entry.query = "Were you born in Vienna in December 1770?".into();
    entry.source_memory = "I was born in Bonn in December 1770.".into();
    let bank = common::case_bank();
    let narratives = NarrativeCache::new();
    let templates = TemplateSet::default();
    let characters = vec![character.profile.clone()];
    let ctx = StrategyContext {
        provider: &provider,
        templates: &templates,
        responder: &chat,
        embedder: Some(&emb),
        case_bank: Some(&bank),
        indexes: &indexes,
        chunk_texts: &chunk_texts,
        narratives: &narratives,
        characters: &characters,
    };
    let mut verdicts = Vec::new();
    for kind in [StrategyKind::Vanilla, StrategyKind::S2rd] {
        let spec = StrategySpec::new(kind, "live-chat");
        let rec = strategies::run_record(&ctx, &spec, &entry, 0).map_err(|e| format!("{kind:?}: {e}"))?;
        let j = judge::judge_record(&provider, &judge_ep, &templates, &character.profile.name, &entry, &rec)
            .map_err(|e| e.to_string())?;
        ensure!(j.verdict != Verdict::Invalid, "{kind:?}: judge gave no parseable verdict");
        verdicts.push(format!("{}={:?}", kind.as_str(), j.verdict));
    }
    Ok(Outcome::Pass(format!("live endpoint ok: {}", verdicts.join(", "))))
}

