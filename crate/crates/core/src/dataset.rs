//! Final probing-dataset assembly, validation, persistence and statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CharacterProfile, Chunk};
use crate::inject::ErrorQuery;
use crate::jsonl::{self, JsonlError};
use crate::memgen::Memory;
use crate::taxonomy::{ErrorType, MemoryCategory, ScreeningStatus};
use crate::text::word_count;

pub const DATASET_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub query_id: String,
    pub character_id: String,
    pub memory_id: String,
    pub chunk_id: String,
    pub memory_category: MemoryCategory,
    pub error_type: ErrorType,
    pub query: String,
    pub source_memory: String,
    pub false_memory: String,
    pub explanation: String,
    pub topics: Vec<String>,
}

/// Sidecar metadata written next to `dataset.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub construction_seed: u64,
    pub n_records: usize,
    pub n_memories: usize,
    /// `error_type -> category -> count`.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub characters: Vec<CharacterProfile>,
    pub template_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbingDataset {
    pub records: Vec<DatasetRecord>,
    pub characters: Vec<CharacterProfile>,
    pub version: String,
    pub construction_seed: u64,
    pub template_hashes: BTreeMap<String, String>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("IntegrityError: {item}: {detail}")]
    Integrity { item: String, detail: String },
    #[error("EmptyDataset")]
    EmptyDataset,
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] JsonlError),
}

impl DatasetError {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetError::Integrity { .. } => "IntegrityError",
            DatasetError::EmptyDataset => "EmptyDataset",
            DatasetError::Manifest { .. } => "ManifestError",
            DatasetError::Io(_) => "IoError",
        }
    }
}

fn integrity(item: &str, detail: impl Into<String>) -> DatasetError {
    DatasetError::Integrity {
        item: item.to_string(),
        detail: detail.into(),
    }
}

/// Builds the dataset from kept queries. Every query must resolve to a
/// memory, chunk and character, and every memory must contribute exactly one
/// kept KKE and one kept UKE query. Records are ordered by
/// `(character_id, memory_id, error_type)`.
pub fn assemble(
    queries: &[ErrorQuery],
    memories: &[Memory],
    chunks: &[Chunk],
    characters: &[CharacterProfile],
    construction_seed: u64,
    template_hashes: BTreeMap<String, String>,
) -> Result<ProbingDataset, DatasetError> {
    let memory_by_id: HashMap<&str, &Memory> = memories.iter().map(|m| (m.memory_id.as_str(), m)).collect();
    let chunk_ids: HashSet<&str> = chunks.iter().map(|c| c.chunk_id.as_str()).collect();
    let character_ids: HashSet<&str> = characters.iter().map(|c| c.character_id.as_str()).collect();

    let mut records = Vec::new();
    let mut pairs: BTreeMap<&str, [usize; 2]> = BTreeMap::new();
    for q in queries.iter().filter(|q| q.screening_status == ScreeningStatus::Kept) {
        let memory = memory_by_id
            .get(q.memory_id.as_str())
            .ok_or_else(|| integrity(&q.query_id, format!("memory {} does not exist", q.memory_id)))?;
        if memory.chunk_id != q.chunk_id || memory.character_id != q.character_id {
            return Err(integrity(&q.query_id, "chunk or character disagrees with its memory"));
        }
        if !chunk_ids.contains(q.chunk_id.as_str()) {
            return Err(integrity(&q.query_id, format!("chunk {} does not exist", q.chunk_id)));
        }
        if !character_ids.contains(q.character_id.as_str()) {
            return Err(integrity(&q.query_id, format!("character {} is not registered", q.character_id)));
        }
        if memory.category != q.memory_category {
            return Err(integrity(&q.query_id, "category disagrees with its memory"));
        }
        let slot = match q.error_type {
            ErrorType::Kke => 0,
            ErrorType::Uke => 1,
        };
        pairs.entry(q.memory_id.as_str()).or_default()[slot] += 1;
        records.push(DatasetRecord {
            query_id: q.query_id.clone(),
            character_id: q.character_id.clone(),
            memory_id: q.memory_id.clone(),
            chunk_id: q.chunk_id.clone(),
            memory_category: q.memory_category,
            error_type: q.error_type,
            query: q.query_text.clone(),
            source_memory: memory.text.clone(),
            false_memory: q.false_memory.clone(),
            explanation: q.explanation.clone(),
            topics: q.topics.clone(),
        });
    }
    for (memory_id, counts) in &pairs {
        if *counts != [1, 1] {
            return Err(integrity(
                memory_id,
                format!("expected one kept KKE and one kept UKE query, found {} and {}", counts[0], counts[1]),
            ));
        }
    }
    sort_records(&mut records);
    let mut characters = characters.to_vec();
    characters.sort_by(|a, b| a.character_id.cmp(&b.character_id));
    Ok(ProbingDataset {
        records,
        characters,
        version: DATASET_VERSION.to_string(),
        construction_seed,
        template_hashes,
    })
}

fn sort_records(records: &mut [DatasetRecord]) {
    records.sort_by(|a, b| {
        (&a.character_id, &a.memory_id, a.error_type).cmp(&(&b.character_id, &b.memory_id, b.error_type))
    });
}

impl ProbingDataset {
    /// Structural checks that hold for any finalized dataset: one KKE and one
    /// UKE query per memory, and identical category counts in both halves.
    pub fn check_invariants(&self) -> Result<(), DatasetError> {
        let mut per_memory: BTreeMap<&str, (usize, usize, MemoryCategory)> = BTreeMap::new();
        for r in &self.records {
            let e = per_memory
                .entry(r.memory_id.as_str())
                .or_insert((0, 0, r.memory_category));
            if e.2 != r.memory_category {
                return Err(integrity(&r.memory_id, "queries disagree on category"));
            }
            match r.error_type {
                ErrorType::Kke => e.0 += 1,
                ErrorType::Uke => e.1 += 1,
            }
        }
        for (m, (k, u, _)) in &per_memory {
            if (*k, *u) != (1, 1) {
                return Err(integrity(m, format!("{k} KKE and {u} UKE queries")));
            }
        }
        let counts = self.counts();
        if counts.get("kke") != counts.get("uke") {
            return Err(integrity("dataset", "KKE and UKE category counts differ"));
        }
        Ok(())
    }

    pub fn counts(&self) -> BTreeMap<String, BTreeMap<String, usize>> {
        let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for t in ErrorType::ALL {
            let row = counts.entry(t.as_str().to_string()).or_default();
            for c in MemoryCategory::ALL {
                row.insert(c.as_str().to_string(), 0);
            }
        }
        for r in &self.records {
            *counts
                .get_mut(r.error_type.as_str())
                .unwrap()
                .get_mut(r.memory_category.as_str())
                .unwrap() += 1;
        }
        counts
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            version: self.version.clone(),
            construction_seed: self.construction_seed,
            n_records: self.records.len(),
            n_memories: self.records.iter().map(|r| &r.memory_id).collect::<HashSet<_>>().len(),
            counts: self.counts(),
            characters: self.characters.clone(),
            template_hashes: self.template_hashes.clone(),
        }
    }

    pub fn get(&self, query_id: &str) -> Option<&DatasetRecord> {
        self.records.iter().find(|r| r.query_id == query_id)
    }

    pub fn character(&self, character_id: &str) -> Option<&CharacterProfile> {
        self.characters.iter().find(|c| c.character_id == character_id)
    }

    /// Writes `path` (JSON lines) and its manifest sidecar.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        jsonl::write(path, &self.records)?;
        let manifest_path = manifest_path(path);
        let text = serde_json::to_string_pretty(&self.manifest()).map_err(JsonlError::from)?;
        std::fs::write(&manifest_path, text + "\n").map_err(|source| JsonlError::Io {
            path: manifest_path.clone(),
            source,
        })?;
        Ok(())
    }

    /// Reads a dataset and its manifest sidecar.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let records: Vec<DatasetRecord> = jsonl::read(path)?;
        let manifest_path = manifest_path(path);
        let text = std::fs::read_to_string(&manifest_path).map_err(|source| JsonlError::Io {
            path: manifest_path.clone(),
            source,
        })?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
        if manifest.n_records != records.len() {
            return Err(DatasetError::Manifest {
                path: manifest_path,
                message: format!("manifest lists {} records, file has {}", manifest.n_records, records.len()),
            });
        }
        Ok(ProbingDataset {
            records,
            characters: manifest.characters,
            version: manifest.version,
            construction_seed: manifest.construction_seed,
            template_hashes: manifest.template_hashes,
        })
    }
}

/// `dataset.jsonl` -> `dataset.manifest.json`.
pub fn manifest_path(dataset_path: &Path) -> PathBuf {
    let stem = dataset_path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    dataset_path.with_file_name(format!("{stem}.manifest.json"))
}

/// One statistics cell. `None` in a key position marks a total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsCell {
    pub error_type: Option<ErrorType>,
    pub category: Option<MemoryCategory>,
    pub sample_count: usize,
    /// Unrounded mean of whitespace-token word counts (0 for an empty cell).
    pub mean_words: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Per `(error_type, category)`, in taxonomy order.
    pub cells: Vec<StatsCell>,
    /// Per error type over all categories.
    pub totals: Vec<StatsCell>,
    pub overall: StatsCell,
}

impl DatasetStats {
    pub fn cell(&self, error_type: ErrorType, category: MemoryCategory) -> &StatsCell {
        self.cells
            .iter()
            .find(|c| c.error_type == Some(error_type) && c.category == Some(category))
            .expect("every cell is present")
    }

    pub fn total(&self, error_type: ErrorType) -> &StatsCell {
        self.totals.iter().find(|c| c.error_type == Some(error_type)).unwrap()
    }
}

fn cell<'a>(
    error_type: Option<ErrorType>,
    category: Option<MemoryCategory>,
    records: impl Iterator<Item = &'a DatasetRecord>,
) -> StatsCell {
    let (n, words) = records.fold((0usize, 0usize), |(n, w), r| (n + 1, w + word_count(&r.query)));
    StatsCell {
        error_type,
        category,
        sample_count: n,
        mean_words: if n == 0 { 0.0 } else { words as f64 / n as f64 },
    }
}

/// Sample counts and mean words per query for each error type and category.
pub fn stats(records: &[DatasetRecord]) -> Result<DatasetStats, DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let mut cells = Vec::new();
    let mut totals = Vec::new();
    for t in ErrorType::ALL {
        for c in MemoryCategory::ALL {
            cells.push(cell(
                Some(t),
                Some(c),
                records.iter().filter(|r| r.error_type == t && r.memory_category == c),
            ));
        }
        totals.push(cell(Some(t), None, records.iter().filter(|r| r.error_type == t)));
    }
    Ok(DatasetStats {
        cells,
        totals,
        overall: cell(None, None, records.iter()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: usize, t: ErrorType, c: MemoryCategory, words: usize) -> DatasetRecord {
        DatasetRecord {
            query_id: format!("q{id}"),
            character_id: "c".into(),
            memory_id: format!("m{id}"),
            chunk_id: "c-c000".into(),
            memory_category: c,
            error_type: t,
            query: vec!["w"; words].join(" "),
            source_memory: "I".into(),
            false_memory: "I".into(),
            explanation: "e".into(),
            topics: vec![],
        }
    }

    #[test]
    fn single_and_mean() {
        let s = stats(&[record(0, ErrorType::Kke, MemoryCategory::Event, 10)]).unwrap();
        assert_eq!(s.cell(ErrorType::Kke, MemoryCategory::Event).sample_count, 1);
        assert_eq!(s.cell(ErrorType::Kke, MemoryCategory::Event).mean_words, 10.0);
        let s = stats(&[
            record(0, ErrorType::Kke, MemoryCategory::Event, 10),
            record(1, ErrorType::Kke, MemoryCategory::Event, 20),
        ])
        .unwrap();
        assert_eq!(s.cell(ErrorType::Kke, MemoryCategory::Event).mean_words, 15.0);
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(stats(&[]), Err(DatasetError::EmptyDataset)));
    }

    proptest! {
        #[test]
        fn stats_ignore_order(mut words in proptest::collection::vec((0usize..2, 0usize..4, 1usize..40), 1..60), seed in any::<u64>()) {
            let records: Vec<DatasetRecord> = words
                .iter()
                .enumerate()
                .map(|(i, &(t, c, w))| record(i, ErrorType::ALL[t], MemoryCategory::ALL[c], w))
                .collect();
            let a = stats(&records).unwrap();
            // deterministic shuffle
            let mut shuffled = records.clone();
            let n = shuffled.len();
            for i in 0..n {
                let j = (seed.wrapping_mul(i as u64 + 1).wrapping_add(7) % n as u64) as usize;
                shuffled.swap(i, j);
            }
            prop_assert_eq!(&a, &stats(&shuffled).unwrap());
            let total: usize = a.cells.iter().map(|c| c.sample_count).sum();
            prop_assert_eq!(total, records.len());
            words.clear();
        }
    }
}
