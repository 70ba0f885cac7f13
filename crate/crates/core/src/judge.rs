//! LLM-as-judge verdicts and accuracy / SEM aggregation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetRecord, ProbingDataset};
use crate::prompts::{PromptError, TemplateSet, ASSISTANT_SYSTEM};
use crate::provider::{ModelEndpoint, Provider, ProviderError};
use crate::strategies::{DetectionRecord, RunFailure};
use crate::taxonomy::{ErrorType, MemoryCategory};

/// Parse attempts per record: the first call plus two retries.
pub const JUDGE_ATTEMPTS: u32 = 3;

pub const WARN_MISSING_EXPLANATION: &str = "missing_explanation";

static JUDGMENT_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^[\s*#>_-]*judge?ments?[\s*_]*[:：][\s*_]*(yes|no)\b").unwrap()
});
static EXPLANATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^[\s*#>_-]*explanation[\s*_]*[:：]").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub query_id: String,
    pub trial_index: u32,
    pub verdict: Verdict,
    pub judge_explanation: String,
    pub raw_text: String,
    /// Judge calls spent (0 when there was no response to judge).
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedJudgment {
    pub verdict: Verdict,
    pub explanation: String,
    pub warnings: Vec<String>,
}

/// Parses `explanation: ...` / `judgment: yes|no`. Labels are
/// case-insensitive and may carry markdown emphasis; the last judgment line
/// wins. Returns `None` when no judgment line is present.
pub fn parse_judgment(text: &str) -> Option<ParsedJudgment> {
    let caps = JUDGMENT_LINE.captures_iter(text).last()?;
    let verdict = if caps[1].eq_ignore_ascii_case("yes") {
        Verdict::Yes
    } else {
        Verdict::No
    };
    let judgment_start = caps.get(0).unwrap().start();
    let before = &text[..judgment_start];
    let explanation = before
        .lines()
        .position(|l| EXPLANATION.is_match(l))
        .map(|i| {
            let lines: Vec<&str> = before.lines().skip(i).collect();
            let joined = lines.join("\n");
            EXPLANATION.replace(&joined, "").trim().to_string()
        })
        .unwrap_or_default();
    let mut warnings = Vec::new();
    if explanation.is_empty() {
        warnings.push(WARN_MISSING_EXPLANATION.to_string());
    }
    Some(ParsedJudgment {
        verdict,
        explanation,
        warnings,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("UnknownQuery: {0}")]
    UnknownQuery(String),
    #[error("MissingTrial: no judgment for {query_id} trial {trial}")]
    MissingTrial { query_id: String, trial: u32 },
    #[error("DuplicateJudgment: {query_id} trial {trial}")]
    DuplicateJudgment { query_id: String, trial: u32 },
    #[error("EmptyInput: {0}")]
    EmptyInput(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl JudgeError {
    pub fn name(&self) -> &'static str {
        match self {
            JudgeError::UnknownQuery(_) => "UnknownQuery",
            JudgeError::MissingTrial { .. } => "MissingTrial",
            JudgeError::DuplicateJudgment { .. } => "DuplicateJudgment",
            JudgeError::EmptyInput(_) => "EmptyInput",
            JudgeError::Provider(e) => e.name(),
            JudgeError::Prompt(e) => e.name(),
        }
    }
}

/// Judges one response. Unparseable judge output is retried with the same
/// prompt; after [`JUDGE_ATTEMPTS`] failures the verdict is `Invalid`.
pub fn judge_record(
    provider: &Provider,
    judge: &ModelEndpoint,
    templates: &TemplateSet,
    role_name: &str,
    entry: &DatasetRecord,
    record: &DetectionRecord,
) -> Result<Judgment, JudgeError> {
    if record.query_id != entry.query_id {
        return Err(JudgeError::UnknownQuery(record.query_id.clone()));
    }
    let prompt = templates.judge(
        entry.error_type,
        role_name,
        &entry.source_memory,
        &entry.query,
        &record.response_text,
    )?;
    let mut raw = String::new();
    for attempt in 0..JUDGE_ATTEMPTS {
        raw = provider
            .chat_text(judge, ASSISTANT_SYSTEM, &prompt, record.trial_index, attempt)?
            .response_text;
        if let Some(parsed) = parse_judgment(&raw) {
            return Ok(Judgment {
                query_id: record.query_id.clone(),
                trial_index: record.trial_index,
                verdict: parsed.verdict,
                judge_explanation: parsed.explanation,
                raw_text: raw,
                attempts: attempt + 1,
                warnings: parsed.warnings,
            });
        }
        log::warn!("{} trial {}: unparseable judge output", record.query_id, record.trial_index);
    }
    Ok(Judgment {
        query_id: record.query_id.clone(),
        trial_index: record.trial_index,
        verdict: Verdict::Invalid,
        judge_explanation: String::new(),
        raw_text: raw,
        attempts: JUDGE_ATTEMPTS,
        warnings: vec!["unparseable".into()],
    })
}

/// An `Invalid` judgment standing in for a response that was never produced.
pub fn judgment_for_failure(failure: &RunFailure) -> Judgment {
    Judgment {
        query_id: failure.query_id.clone(),
        trial_index: failure.trial_index,
        verdict: Verdict::Invalid,
        judge_explanation: String::new(),
        raw_text: String::new(),
        attempts: 0,
        warnings: vec![format!("no_response: {} at {}", failure.error, failure.stage)],
    }
}

/// Judges all records in parallel; output ordered by `(query_id, trial)`.
pub fn judge_all(
    provider: &Provider,
    judge: &ModelEndpoint,
    templates: &TemplateSet,
    dataset: &ProbingDataset,
    records: &[DetectionRecord],
    failures: &[RunFailure],
    workers: usize,
) -> Result<Vec<Judgment>, JudgeError> {
    let entries: HashMap<&str, &DatasetRecord> = dataset.records.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    let judged: Vec<Result<Judgment, JudgeError>> = pool.install(|| {
        records
            .par_iter()
            .map(|rec| {
                let entry = entries
                    .get(rec.query_id.as_str())
                    .ok_or_else(|| JudgeError::UnknownQuery(rec.query_id.clone()))?;
                let name = dataset
                    .character(&entry.character_id)
                    .map(|c| c.name.as_str())
                    .ok_or_else(|| JudgeError::UnknownQuery(rec.query_id.clone()))?;
                judge_record(provider, judge, templates, name, entry, rec)
            })
            .collect()
    });
    let mut out = judged.into_iter().collect::<Result<Vec<_>, _>>()?;
    out.extend(failures.iter().map(judgment_for_failure));
    out.sort_by(|a, b| (&a.query_id, a.trial_index).cmp(&(&b.query_id, b.trial_index)));
    Ok(out)
}

/// Accuracy of one cell across trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCell {
    pub error_type: Option<ErrorType>,
    pub category: Option<MemoryCategory>,
    /// Items in the cell (per trial).
    pub n: usize,
    pub trial_accuracies: Vec<f64>,
    pub accuracy_mean: f64,
    pub sem: f64,
    /// Invalid verdicts summed over trials.
    pub invalid: usize,
}

/// Per `(error_type, category)` cells, per-error-type averages and the
/// overall average. `None` in a key position marks an aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub trials: u32,
    pub cells: Vec<ScoreCell>,
    pub averages: Vec<ScoreCell>,
    pub overall: ScoreCell,
}

impl ScoreTable {
    pub fn cell(&self, error_type: ErrorType, category: MemoryCategory) -> &ScoreCell {
        self.cells
            .iter()
            .find(|c| c.error_type == Some(error_type) && c.category == Some(category))
            .expect("every cell is present")
    }

    pub fn average(&self, error_type: ErrorType) -> &ScoreCell {
        self.averages.iter().find(|c| c.error_type == Some(error_type)).unwrap()
    }
}

/// Mean and standard error of the mean (sample standard deviation over
/// `sqrt(n)`; zero for fewer than two values).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    if values.iter().all(|v| *v == values[0]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

fn score_cell(
    error_type: Option<ErrorType>,
    category: Option<MemoryCategory>,
    items: &[&DatasetRecord],
    verdicts: &HashMap<(&str, u32), Verdict>,
    trials: u32,
) -> ScoreCell {
    let mut accs = Vec::with_capacity(trials as usize);
    let mut invalid = 0;
    for t in 0..trials {
        let mut correct = 0usize;
        for item in items {
            match verdicts[&(item.query_id.as_str(), t)] {
                Verdict::Yes => correct += 1,
                Verdict::Invalid => invalid += 1,
                Verdict::No => {}
            }
        }
        accs.push(if items.is_empty() { 0.0 } else { correct as f64 / items.len() as f64 });
    }
    let (accuracy_mean, sem) = mean_sem(&accs);
    ScoreCell {
        error_type,
        category,
        n: items.len(),
        trial_accuracies: accs,
        accuracy_mean,
        sem,
        invalid,
    }
}

/// Scores judgments against the dataset. Every `(query_id, trial)` for
/// `trial < trials` must appear exactly once; invalid verdicts count as
/// incorrect. Accuracy is computed per trial and then averaged.
pub fn score(judgments: &[Judgment], dataset: &[DatasetRecord], trials: u32) -> Result<ScoreTable, JudgeError> {
    if dataset.is_empty() {
        return Err(JudgeError::EmptyInput("dataset".into()));
    }
    if trials == 0 {
        return Err(JudgeError::EmptyInput("trials".into()));
    }
    let known: HashSet<&str> = dataset.iter().map(|r| r.query_id.as_str()).collect();
    let mut verdicts: HashMap<(&str, u32), Verdict> = HashMap::new();
    for j in judgments {
        if !known.contains(j.query_id.as_str()) {
            return Err(JudgeError::UnknownQuery(j.query_id.clone()));
        }
        if j.trial_index >= trials {
            return Err(JudgeError::EmptyInput(format!(
                "judgment for trial {} but only {trials} trials requested",
                j.trial_index
            )));
        }
        if verdicts.insert((j.query_id.as_str(), j.trial_index), j.verdict).is_some() {
            return Err(JudgeError::DuplicateJudgment {
                query_id: j.query_id.clone(),
                trial: j.trial_index,
            });
        }
    }
    for r in dataset {
        for t in 0..trials {
            if !verdicts.contains_key(&(r.query_id.as_str(), t)) {
                return Err(JudgeError::MissingTrial {
                    query_id: r.query_id.clone(),
                    trial: t,
                });
            }
        }
    }
    let mut cells = Vec::new();
    let mut averages = Vec::new();
    for e in ErrorType::ALL {
        for c in MemoryCategory::ALL {
            let items: Vec<&DatasetRecord> = dataset
                .iter()
                .filter(|r| r.error_type == e && r.memory_category == c)
                .collect();
            cells.push(score_cell(Some(e), Some(c), &items, &verdicts, trials));
        }
        let items: Vec<&DatasetRecord> = dataset.iter().filter(|r| r.error_type == e).collect();
        averages.push(score_cell(Some(e), None, &items, &verdicts, trials));
    }
    let all: Vec<&DatasetRecord> = dataset.iter().collect();
    Ok(ScoreTable {
        trials,
        cells,
        averages,
        overall: score_cell(None, None, &all, &verdicts, trials),
    })
}

/// One row of a manual audit sheet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub query_id: String,
    pub trial_index: u32,
    pub error_type: ErrorType,
    pub memory_category: MemoryCategory,
    pub source_memory: String,
    pub query: String,
    pub response: String,
    pub verdict: Verdict,
    pub judge_explanation: String,
    /// Left blank for the human auditor.
    pub human_verdict: String,
}

/// Draws `n` judgments uniformly without replacement (seeded) for manual
/// inspection, ordered by `(query_id, trial)`.
pub fn audit_sample(
    judgments: &[Judgment],
    records: &[DetectionRecord],
    dataset: &[DatasetRecord],
    n: usize,
    seed: u64,
) -> Vec<AuditRow> {
    let entries: HashMap<&str, &DatasetRecord> = dataset.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let responses: HashMap<(&str, u32), &str> = records
        .iter()
        .map(|r| ((r.query_id.as_str(), r.trial_index), r.response_text.as_str()))
        .collect();
    let mut pool: Vec<&Judgment> = judgments
        .iter()
        .filter(|j| entries.contains_key(j.query_id.as_str()))
        .collect();
    pool.sort_by(|a, b| (&a.query_id, a.trial_index).cmp(&(&b.query_id, b.trial_index)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    pool.sort_by(|a, b| (&a.query_id, a.trial_index).cmp(&(&b.query_id, b.trial_index)));
    pool.into_iter()
        .map(|j| {
            let e = entries[j.query_id.as_str()];
            AuditRow {
                query_id: j.query_id.clone(),
                trial_index: j.trial_index,
                error_type: e.error_type,
                memory_category: e.memory_category,
                source_memory: e.source_memory.clone(),
                query: e.query.clone(),
                response: responses
                    .get(&(j.query_id.as_str(), j.trial_index))
                    .map(|s| s.to_string())
                    .unwrap_or_default(),
                verdict: j.verdict,
                judge_explanation: j.judge_explanation.clone(),
                human_verdict: String::new(),
            }
        })
        .collect()
}

/// Summary of verdict counts, for logging.
pub fn verdict_counts(judgments: &[Judgment]) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::from([("yes", 0), ("no", 0), ("invalid", 0)]);
    for j in judgments {
        let key = match j.verdict {
            Verdict::Yes => "yes",
            Verdict::No => "no",
            Verdict::Invalid => "invalid",
        };
        *counts.get_mut(key).unwrap() += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_canonical_form() {
        let p = parse_judgment("explanation: corrected the tutor's name.\n\njudgment: yes").unwrap();
        assert_eq!(p.verdict, Verdict::Yes);
        assert_eq!(p.explanation, "corrected the tutor's name.");
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn tolerance_table() {
        let cases: &[(&str, Option<Verdict>, bool)] = &[
            ("JUDGMENT: No", Some(Verdict::No), true),
            ("Explanation: ok\n\nJudgment: YES", Some(Verdict::Yes), false),
            ("explanation: ok\n\njudgement: no", Some(Verdict::No), false),
            ("**Explanation:** fine\n\n**Judgment:** Yes", Some(Verdict::Yes), false),
            ("explanation: a\nmore\n\njudgment:no.", Some(Verdict::No), false),
            ("explanation: a\n\njudgment: maybe", None, false),
            ("the answer is yes", None, false),
            ("", None, false),
            ("explanation: judgment: yes is what I'd say\n\njudgment: no", Some(Verdict::No), false),
        ];
        for (text, verdict, missing) in cases {
            let parsed = parse_judgment(text);
            assert_eq!(parsed.as_ref().map(|p| p.verdict), *verdict, "{text:?}");
            if let Some(p) = parsed {
                assert_eq!(p.warnings.contains(&WARN_MISSING_EXPLANATION.to_string()), *missing, "{text:?}");
            }
        }
    }

    #[test]
    fn sem_of_three_trials() {
        let (m, s) = mean_sem(&[0.5, 0.6, 0.7]);
        assert!((m - 0.6).abs() < 1e-12);
        assert!((s - 0.1 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_sem(&[0.4, 0.4, 0.4]).1, 0.0);
    }
}
