//! Human screening: review items, per-annotator verdicts, intersection
//! keep-sets and agreement statistics.
//!
//! Verdicts are stored per `(item_id, annotator_id)`. An item survives
//! finalization only if every annotator kept it; the reported overlap is
//! `kept_all / kept_any`, with per-annotator keep counts alongside.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::inject::ErrorQuery;
use crate::jsonl::{self, JsonlError};
use crate::memgen::Memory;
use crate::taxonomy::{ErrorType, MemoryCategory};

const ITEMS_FILE: &str = "items.jsonl";
const VERDICTS_FILE: &str = "verdicts.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Memory,
    QueryPair,
}

impl std::str::FromStr for ItemKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "memory" => Ok(ItemKind::Memory),
            "query_pair" => Ok(ItemKind::QueryPair),
            other => Err(format!("unknown item kind '{other}' (expected memory or query_pair)")),
        }
    }
}

impl ItemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemKind::Memory => "memory",
            ItemKind::QueryPair => "query_pair",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Reject,
}

/// What an annotator sees. Query-pair items are individual queries; the two
/// queries of one memory share `memory_id` so a reviewer can see them
/// together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub kind: ItemKind,
    pub memory_id: String,
    pub character_id: String,
    pub source_chunk_text: String,
    pub candidate_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub category: MemoryCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_type: Option<ErrorType>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub review_flags: Vec<String>,
}

impl ReviewItem {
    pub fn for_memory(memory: &Memory, chunk_text: &str) -> Self {
        ReviewItem {
            item_id: memory.memory_id.clone(),
            kind: ItemKind::Memory,
            memory_id: memory.memory_id.clone(),
            character_id: memory.character_id.clone(),
            source_chunk_text: chunk_text.to_string(),
            candidate_text: memory.text.clone(),
            explanation: None,
            category: memory.category,
            error_type: None,
            review_flags: vec![],
        }
    }

    pub fn for_query(query: &ErrorQuery, chunk_text: &str) -> Self {
        ReviewItem {
            item_id: query.query_id.clone(),
            kind: ItemKind::QueryPair,
            memory_id: query.memory_id.clone(),
            character_id: query.character_id.clone(),
            source_chunk_text: chunk_text.to_string(),
            candidate_text: query.query_text.clone(),
            explanation: Some(query.explanation.clone()),
            category: query.memory_category,
            error_type: Some(query.error_type),
            review_flags: query.review_flags.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub item_id: String,
    pub annotator_id: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Seconds since the Unix epoch (0 for scripted verdicts).
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MissingVerdict {
    pub item_id: String,
    pub annotator_id: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ScreeningError {
    #[error("UnknownItem: {0}")]
    UnknownItem(String),
    #[error("AlreadyFinalized: {annotator_id} already gave a different verdict on {item_id}")]
    AlreadyFinalized { item_id: String, annotator_id: String },
    #[error("IncompleteVerdicts: {} verdicts missing{}", missing.len(), if *unassigned_annotators > 0 { format!(", {unassigned_annotators} annotators not yet seen") } else { String::new() })]
    IncompleteVerdicts {
        missing: Vec<MissingVerdict>,
        unassigned_annotators: usize,
    },
    #[error("InvalidRules: {0}")]
    InvalidRules(String),
    #[error("InvalidAnnotator: annotator id must be non-empty")]
    InvalidAnnotator,
    #[error(transparent)]
    Io(#[from] JsonlError),
}

impl ScreeningError {
    pub fn name(&self) -> &'static str {
        match self {
            ScreeningError::UnknownItem(_) => "UnknownItem",
            ScreeningError::AlreadyFinalized { .. } => "AlreadyFinalized",
            ScreeningError::IncompleteVerdicts { .. } => "IncompleteVerdicts",
            ScreeningError::InvalidRules(_) => "InvalidRules",
            ScreeningError::InvalidAnnotator => "InvalidAnnotator",
            ScreeningError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub item_kind: ItemKind,
    pub n_items: usize,
    pub kept_all: usize,
    pub kept_any: usize,
    pub overlap_ratio: f64,
    pub annotators: Vec<String>,
    pub per_annotator_keep: BTreeMap<String, usize>,
    pub per_annotator_keep_rate: BTreeMap<String, f64>,
    /// Items kept by every annotator, in id order.
    pub kept_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindProgress {
    pub kind: ItemKind,
    pub n_items: usize,
    /// Verdicts submitted per annotator.
    pub verdicts: BTreeMap<String, usize>,
    pub missing: usize,
}

/// Items and verdicts, optionally persisted under a directory as
/// `items.jsonl` and an append-only `verdicts.jsonl`.
#[derive(Debug, Default)]
pub struct ScreeningStore {
    items: BTreeMap<String, ReviewItem>,
    verdicts: BTreeMap<(String, String), Verdict>,
    roster: Vec<String>,
    dir: Option<PathBuf>,
}

impl ScreeningStore {
    /// An in-memory store. With an empty `roster`, the annotators of a kind
    /// are those who have submitted at least one verdict on it.
    pub fn new(roster: Vec<String>) -> Self {
        ScreeningStore {
            roster,
            ..Default::default()
        }
    }

    /// Opens (or creates) a persisted store.
    pub fn open(dir: &Path, roster: Vec<String>) -> Result<Self, ScreeningError> {
        std::fs::create_dir_all(dir).map_err(|source| JsonlError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut store = ScreeningStore::new(roster);
        let items_path = dir.join(ITEMS_FILE);
        if items_path.exists() {
            for item in jsonl::read::<ReviewItem>(&items_path)? {
                store.items.insert(item.item_id.clone(), item);
            }
        }
        let verdicts_path = dir.join(VERDICTS_FILE);
        if verdicts_path.exists() {
            for v in jsonl::read::<Verdict>(&verdicts_path)? {
                store.verdicts.insert((v.item_id.clone(), v.annotator_id.clone()), v);
            }
        }
        store.dir = Some(dir.to_path_buf());
        Ok(store)
    }

    pub fn roster(&self) -> &[String] {
        &self.roster
    }

    /// Registers items (replacing the content of ids already present; their
    /// verdicts are kept).
    pub fn add_items(&mut self, items: impl IntoIterator<Item = ReviewItem>) -> Result<(), ScreeningError> {
        for item in items {
            self.items.insert(item.item_id.clone(), item);
        }
        if let Some(dir) = &self.dir {
            let all: Vec<&ReviewItem> = self.items.values().collect();
            jsonl::write(&dir.join(ITEMS_FILE), &all)?;
        }
        Ok(())
    }

    pub fn item(&self, item_id: &str) -> Option<&ReviewItem> {
        self.items.get(item_id)
    }

    pub fn items(&self, kind: ItemKind) -> impl Iterator<Item = &ReviewItem> {
        self.items.values().filter(move |i| i.kind == kind)
    }

    pub fn verdicts(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.values()
    }

    pub fn verdict(&self, item_id: &str, annotator_id: &str) -> Option<&Verdict> {
        self.verdicts.get(&(item_id.to_string(), annotator_id.to_string()))
    }

    /// Records a verdict. Re-submitting the same decision returns the stored
    /// verdict unchanged; a different decision is refused.
    pub fn record_verdict(
        &mut self,
        item_id: &str,
        annotator_id: &str,
        decision: Decision,
        reason: Option<String>,
        timestamp: u64,
    ) -> Result<Verdict, ScreeningError> {
        if annotator_id.trim().is_empty() {
            return Err(ScreeningError::InvalidAnnotator);
        }
        if !self.items.contains_key(item_id) {
            return Err(ScreeningError::UnknownItem(item_id.to_string()));
        }
        let key = (item_id.to_string(), annotator_id.to_string());
        if let Some(existing) = self.verdicts.get(&key) {
            return if existing.decision == decision {
                Ok(existing.clone())
            } else {
                Err(ScreeningError::AlreadyFinalized {
                    item_id: item_id.to_string(),
                    annotator_id: annotator_id.to_string(),
                })
            };
        }
        let verdict = Verdict {
            item_id: item_id.to_string(),
            annotator_id: annotator_id.to_string(),
            decision,
            reason,
            timestamp,
        };
        if let Some(dir) = &self.dir {
            jsonl::append(&dir.join(VERDICTS_FILE), &verdict)?;
        }
        self.verdicts.insert(key, verdict.clone());
        Ok(verdict)
    }

    /// Items of `kind` still lacking a verdict from `annotator_id`, in id
    /// order.
    pub fn queue(&self, annotator_id: &str, kind: ItemKind) -> Vec<&ReviewItem> {
        self.items(kind)
            .filter(|i| self.verdict(&i.item_id, annotator_id).is_none())
            .collect()
    }

    /// The annotators considered for `kind`: the roster if configured,
    /// otherwise everyone with a verdict on an item of that kind.
    pub fn annotators(&self, kind: ItemKind) -> Vec<String> {
        if !self.roster.is_empty() {
            return self.roster.clone();
        }
        let set: BTreeSet<&str> = self
            .verdicts
            .values()
            .filter(|v| self.items.get(&v.item_id).is_some_and(|i| i.kind == kind))
            .map(|v| v.annotator_id.as_str())
            .collect();
        set.into_iter().map(String::from).collect()
    }

    /// Intersection keep-set over `required_annotators` annotators.
    pub fn finalize_intersection(
        &self,
        kind: ItemKind,
        required_annotators: usize,
    ) -> Result<ScreeningReport, ScreeningError> {
        let annotators = self.annotators(kind);
        let items: Vec<&ReviewItem> = self.items(kind).collect();
        let missing: Vec<MissingVerdict> = items
            .iter()
            .flat_map(|i| {
                annotators
                    .iter()
                    .filter(|a| self.verdict(&i.item_id, a).is_none())
                    .map(|a| MissingVerdict {
                        item_id: i.item_id.clone(),
                        annotator_id: a.clone(),
                    })
            })
            .collect();
        let unassigned = required_annotators.saturating_sub(annotators.len());
        if !missing.is_empty() || unassigned > 0 {
            return Err(ScreeningError::IncompleteVerdicts {
                missing,
                unassigned_annotators: unassigned,
            });
        }
        Ok(intersect(kind, &items, &annotators, |item, a| {
            self.verdict(item, a).map(|v| v.decision)
        }))
    }

    pub fn progress(&self) -> Vec<KindProgress> {
        [ItemKind::Memory, ItemKind::QueryPair]
            .into_iter()
            .map(|kind| {
                let annotators = self.annotators(kind);
                let items: Vec<&ReviewItem> = self.items(kind).collect();
                let mut verdicts: BTreeMap<String, usize> = annotators.iter().map(|a| (a.clone(), 0)).collect();
                for v in self.verdicts.values() {
                    if self.items.get(&v.item_id).is_some_and(|i| i.kind == kind) {
                        *verdicts.entry(v.annotator_id.clone()).or_default() += 1;
                    }
                }
                let given: usize = annotators.iter().map(|a| verdicts.get(a).copied().unwrap_or(0)).sum();
                KindProgress {
                    kind,
                    n_items: items.len(),
                    missing: items.len() * annotators.len() - given,
                    verdicts,
                }
            })
            .collect()
    }

    /// Scripts verdicts for every annotator in `rules` on every item of
    /// `kind` that lacks one. Returns the number of verdicts recorded.
    pub fn apply_auto_annotator(&mut self, rules: &AutoRules, kind: ItemKind) -> Result<usize, ScreeningError> {
        let compiled = rules.compile()?;
        let ids: Vec<String> = self.items(kind).map(|i| i.item_id.clone()).collect();
        let mut recorded = 0;
        for id in ids {
            for annotator in &rules.annotators {
                if self.verdict(&id, annotator).is_some() {
                    continue;
                }
                let (decision, reason) = compiled.decide(annotator, &self.items[&id]);
                self.record_verdict(&id, annotator, decision, reason, 0)?;
                recorded += 1;
            }
        }
        Ok(recorded)
    }
}

/// Pure intersection over a complete verdict matrix.
fn intersect(
    kind: ItemKind,
    items: &[&ReviewItem],
    annotators: &[String],
    decision: impl Fn(&str, &str) -> Option<Decision>,
) -> ScreeningReport {
    let mut kept_ids = Vec::new();
    let mut kept_any = 0;
    let mut per_annotator_keep: BTreeMap<String, usize> = annotators.iter().map(|a| (a.clone(), 0)).collect();
    for item in items {
        let keeps: Vec<bool> = annotators
            .iter()
            .map(|a| decision(&item.item_id, a) == Some(Decision::Keep))
            .collect();
        for (a, &k) in annotators.iter().zip(&keeps) {
            if k {
                *per_annotator_keep.get_mut(a).unwrap() += 1;
            }
        }
        if keeps.iter().any(|&k| k) {
            kept_any += 1;
        }
        if !keeps.is_empty() && keeps.iter().all(|&k| k) {
            kept_ids.push(item.item_id.clone());
        }
    }
    let n = items.len();
    let kept_all = kept_ids.len();
    ScreeningReport {
        item_kind: kind,
        n_items: n,
        kept_all,
        kept_any,
        overlap_ratio: if kept_any == 0 { 0.0 } else { kept_all as f64 / kept_any as f64 },
        annotators: annotators.to_vec(),
        per_annotator_keep_rate: per_annotator_keep
            .iter()
            .map(|(a, &k)| (a.clone(), if n == 0 { 0.0 } else { k as f64 / n as f64 }))
            .collect(),
        per_annotator_keep,
        kept_ids,
    }
}

/// Scripted annotators for unattended runs.
///
/// ```json
/// {
///   "annotators": ["a1", "a2", "a3"],
///   "default": "keep",
///   "rules": [
///     {"annotator": "a3", "kind": "memory", "pattern": "(?i)weather", "decision": "reject", "reason": "off topic"}
///   ]
/// }
/// ```
///
/// The first rule whose filters all match decides; otherwise `default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoRules {
    pub annotators: Vec<String>,
    #[serde(default = "default_keep")]
    pub default: Decision,
    #[serde(default)]
    pub rules: Vec<AutoRule>,
}

fn default_keep() -> Decision {
    Decision::Keep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoRule {
    #[serde(default)]
    pub annotator: Option<String>,
    #[serde(default)]
    pub kind: Option<ItemKind>,
    #[serde(default)]
    pub item_ids: Option<Vec<String>>,
    /// Regex matched against the candidate text.
    #[serde(default)]
    pub pattern: Option<String>,
    pub decision: Decision,
    #[serde(default)]
    pub reason: Option<String>,
}

struct CompiledRules<'a> {
    rules: Vec<(&'a AutoRule, Option<Regex>)>,
    default: Decision,
}

impl CompiledRules<'_> {
    fn decide(&self, annotator: &str, item: &ReviewItem) -> (Decision, Option<String>) {
        for (rule, re) in &self.rules {
            let hit = rule.annotator.as_deref().is_none_or(|a| a == annotator)
                && rule.kind.is_none_or(|k| k == item.kind)
                && rule.item_ids.as_ref().is_none_or(|ids| ids.contains(&item.item_id))
                && re.as_ref().is_none_or(|re| re.is_match(&item.candidate_text));
            if hit {
                return (rule.decision, rule.reason.clone());
            }
        }
        (self.default, None)
    }
}

impl AutoRules {
    pub fn keep_all(annotators: &[&str]) -> Self {
        AutoRules {
            annotators: annotators.iter().map(|a| a.to_string()).collect(),
            default: Decision::Keep,
            rules: vec![],
        }
    }

    pub fn load(path: &Path) -> Result<Self, ScreeningError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScreeningError::InvalidRules(format!("{}: {e}", path.display())))?;
        let rules: AutoRules = serde_json::from_str(&text)
            .map_err(|e| ScreeningError::InvalidRules(format!("{}: {e}", path.display())))?;
        rules.compile()?;
        Ok(rules)
    }

    fn compile(&self) -> Result<CompiledRules<'_>, ScreeningError> {
        if self.annotators.is_empty() || self.annotators.iter().any(|a| a.trim().is_empty()) {
            return Err(ScreeningError::InvalidRules("annotators must be non-empty ids".into()));
        }
        let rules = self
            .rules
            .iter()
            .map(|r| {
                let re = r
                    .pattern
                    .as_deref()
                    .map(Regex::new)
                    .transpose()
                    .map_err(|e| ScreeningError::InvalidRules(e.to_string()))?;
                Ok((r, re))
            })
            .collect::<Result<_, ScreeningError>>()?;
        Ok(CompiledRules {
            rules,
            default: self.default,
        })
    }
}
