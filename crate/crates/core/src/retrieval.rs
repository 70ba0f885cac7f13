//! Exact cosine top-k search over a character's chunks.
//!
//! # Index file layout
//!
//! All integers little-endian.
//!
//! | field         | type                       |
//! |---------------|----------------------------|
//! | magic         | 8 bytes, `RCKIDX\0\x01`    |
//! | id length     | u32                        |
//! | character id  | UTF-8 bytes                |
//! | dim           | u32                        |
//! | entry count   | u32                        |
//! | per entry     | u32 id length, UTF-8 chunk id, `dim` × f32 |
//!
//! The last magic byte is the format version.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::corpus::Chunk;
use crate::provider::{ModelEndpoint, Provider, ProviderError};

pub const INDEX_MAGIC: [u8; 8] = *b"RCKIDX\0\x01";

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("EmptyCorpus: no chunks for {0}")]
    EmptyCorpus(String),
    #[error("EmptyIndex: {0}")]
    EmptyIndex(String),
    #[error("DimensionMismatch: index has dim {expected}, vector has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("ZeroNorm: embedding of {0} has zero norm")]
    ZeroNorm(String),
    #[error("DuplicateChunk: {0}")]
    DuplicateChunk(String),
    #[error("InvalidK: k must be at least 1")]
    InvalidK,
    #[error("IndexFormat: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

impl RetrievalError {
    pub fn name(&self) -> &'static str {
        match self {
            RetrievalError::EmptyCorpus(_) => "EmptyCorpus",
            RetrievalError::EmptyIndex(_) => "EmptyIndex",
            RetrievalError::DimensionMismatch { .. } => "DimensionMismatch",
            RetrievalError::ZeroNorm(_) => "ZeroNorm",
            RetrievalError::DuplicateChunk(_) => "DuplicateChunk",
            RetrievalError::InvalidK => "InvalidK",
            RetrievalError::Format(_) => "IndexFormat",
            RetrievalError::Io(_) => "IoError",
            RetrievalError::Provider(e) => e.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub values: Vec<f32>,
    norm: f64,
}

/// Immutable embedding index for one character.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    character_id: String,
    dim: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hit {
    pub chunk_id: String,
    pub score: f64,
}

/// Ordering key for a similarity: the score on a 1e-12 grid. Two vectors
/// that are equally similar to the query can come out a few ulps apart
/// (`3/sqrt(18)` vs `1/sqrt(2)`); the grid makes such pairs compare equal so
/// the chunk-id tie-break applies.
pub fn rank_key(score: f64) -> i64 {
    (score * 1e12).round() as i64
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl CorpusIndex {
    /// Builds an index from precomputed vectors. All vectors must share one
    /// dimension and have non-zero norm; chunk ids must be unique.
    pub fn from_vectors(character_id: &str, vectors: Vec<(String, Vec<f32>)>) -> Result<Self, RetrievalError> {
        let dim = vectors
            .first()
            .map(|(_, v)| v.len())
            .ok_or_else(|| RetrievalError::EmptyCorpus(character_id.to_string()))?;
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(vectors.len());
        for (chunk_id, values) in vectors {
            if values.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: values.len(),
                });
            }
            if !seen.insert(chunk_id.clone()) {
                return Err(RetrievalError::DuplicateChunk(chunk_id));
            }
            let n = norm(&values);
            if n == 0.0 || !n.is_finite() {
                return Err(RetrievalError::ZeroNorm(chunk_id));
            }
            entries.push(IndexEntry { chunk_id, values, norm: n });
        }
        Ok(CorpusIndex {
            character_id: character_id.to_string(),
            dim,
            entries,
        })
    }

    pub fn character_id(&self) -> &str {
        &self.character_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Top-`k` entries by cosine similarity, descending; ties go to the
    /// smaller chunk id. Similarities are compared on a 1e-12 grid (see
    /// [`rank_key`]). Returns `min(k, len)` hits.
    pub fn search_vector(&self, query: &[f32], k: usize) -> Result<Vec<Hit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex(self.character_id.clone()));
        }
        if query.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let qn = norm(query);
        if qn == 0.0 || !qn.is_finite() {
            return Err(RetrievalError::ZeroNorm("query".into()));
        }
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .map(|e| {
                let dot: f64 = e.values.iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum();
                Hit {
                    chunk_id: e.chunk_id.clone(),
                    score: (dot / (e.norm * qn)).clamp(-1.0, 1.0),
                }
            })
            .collect();
        hits.sort_by(|a, b| {
            rank_key(b.score)
                .cmp(&rank_key(a.score))
                .then_with(|| a.chunk_id.cmp(&b.chunk_id))
        });
        hits.truncate(k);
        Ok(hits)
    }

    /// Embeds `query_text` and searches.
    pub fn search(
        &self,
        provider: &Provider,
        endpoint: &ModelEndpoint,
        query_text: &str,
        k: usize,
    ) -> Result<Vec<Hit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let v = provider.embed(endpoint, &[query_text.to_string()])?;
        self.search_vector(&v[0].values, k)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), RetrievalError> {
        let u32_of = |n: usize| -> Result<[u8; 4], RetrievalError> {
            u32::try_from(n)
                .map(u32::to_le_bytes)
                .map_err(|_| RetrievalError::Format("length exceeds u32".into()))
        };
        w.write_all(&INDEX_MAGIC)?;
        w.write_all(&u32_of(self.character_id.len())?)?;
        w.write_all(self.character_id.as_bytes())?;
        w.write_all(&u32_of(self.dim)?)?;
        w.write_all(&u32_of(self.entries.len())?)?;
        for e in &self.entries {
            w.write_all(&u32_of(e.chunk_id.len())?)?;
            w.write_all(e.chunk_id.as_bytes())?;
            for v in &e.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, RetrievalError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != INDEX_MAGIC {
            return Err(RetrievalError::Format("bad magic header or unsupported version".into()));
        }
        let mut u32_buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<usize, RetrievalError> {
            r.read_exact(&mut u32_buf)?;
            Ok(u32::from_le_bytes(u32_buf) as usize)
        };
        let read_str = |r: &mut dyn Read, len: usize| -> Result<String, RetrievalError> {
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            String::from_utf8(buf).map_err(|e| RetrievalError::Format(e.to_string()))
        };
        let len = read_u32(&mut r)?;
        let character_id = read_str(&mut r, len)?;
        let dim = read_u32(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut vectors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = read_u32(&mut r)?;
            let chunk_id = read_str(&mut r, len)?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                values.push(f32::from_le_bytes(b));
            }
            vectors.push((chunk_id, values));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(RetrievalError::Format("trailing bytes".into()));
        }
        let index = Self::from_vectors(&character_id, vectors)?;
        if index.dim != dim {
            return Err(RetrievalError::Format("dimension header disagrees with entries".into()));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("idx.tmp");
        {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Embeds every chunk of one character. The provider caches embeddings by
/// text hash, so a rebuild with a warm cache issues no backend calls.
pub fn build_index(
    provider: &Provider,
    endpoint: &ModelEndpoint,
    character_id: &str,
    chunks: &[Chunk],
) -> Result<CorpusIndex, RetrievalError> {
    let own: Vec<&Chunk> = chunks.iter().filter(|c| c.character_id == character_id).collect();
    if own.is_empty() {
        return Err(RetrievalError::EmptyCorpus(character_id.to_string()));
    }
    let texts: Vec<String> = own.iter().map(|c| c.text.trim().to_string()).collect();
    let vectors = provider.embed(endpoint, &texts)?;
    CorpusIndex::from_vectors(
        character_id,
        own.iter().zip(vectors).map(|(c, v)| (c.chunk_id.clone(), v.values)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn index(vectors: &[(&str, Vec<f32>)]) -> CorpusIndex {
        CorpusIndex::from_vectors("c", vectors.iter().map(|(id, v)| (id.to_string(), v.clone())).collect()).unwrap()
    }

    #[test]
    fn hand_computed_ranking() {
        let idx = index(&[("doc0", vec![1.0, 0.0]), ("doc1", vec![0.0, 1.0]), ("doc2", vec![0.6, 0.8])]);
        let hits = idx.search_vector(&[1.0, 0.0], 3).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.chunk_id.as_str()).collect();
        assert_eq!(ids, vec!["doc0", "doc2", "doc1"]);
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        assert!((hits[1].score - 0.6).abs() < 1e-6);
        assert!(hits[2].score.abs() < 1e-12);
    }

    #[test]
    fn k_is_clamped() {
        let idx = index(&[("a", vec![1.0]), ("b", vec![2.0])]);
        assert_eq!(idx.search_vector(&[1.0], 10).unwrap().len(), 2);
    }

    #[test]
    fn ties_break_by_chunk_id() {
        let idx = index(&[("b", vec![1.0, 1.0]), ("a", vec![1.0, 1.0])]);
        let hits = idx.search_vector(&[1.0, 0.0], 2).unwrap();
        assert_eq!(hits[0].chunk_id, "a");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            CorpusIndex::from_vectors("c", vec![("a".into(), vec![0.0, 0.0])]),
            Err(RetrievalError::ZeroNorm(_))
        ));
        let idx = index(&[("a", vec![1.0, 0.0])]);
        assert!(matches!(idx.search_vector(&[1.0], 1), Err(RetrievalError::DimensionMismatch { .. })));
        assert!(matches!(idx.search_vector(&[1.0, 0.0], 0), Err(RetrievalError::InvalidK)));
    }

    #[test]
    fn persistence_round_trip() {
        let idx = index(&[("a", vec![1.0, 0.5]), ("b", vec![-0.25, 3.0])]);
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], &INDEX_MAGIC);
        assert_eq!(CorpusIndex::read_from(&buf[..]).unwrap(), idx);
        buf[7] = 2;
        assert!(matches!(CorpusIndex::read_from(&buf[..]), Err(RetrievalError::Format(_))));
    }

    proptest! {
        #[test]
        fn scores_are_bounded(vs in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 3), 1..20), q in proptest::collection::vec(-5.0f32..5.0, 3)) {
            prop_assume!(vs.iter().all(|v| norm(v) > 1e-3) && norm(&q) > 1e-3);
            let idx = CorpusIndex::from_vectors("c", vs.into_iter().enumerate().map(|(i, v)| (format!("d{i:02}"), v)).collect()).unwrap();
            for h in idx.search_vector(&q, 50).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&h.score));
            }
        }
    }
}
