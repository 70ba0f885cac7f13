use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::InjectError;
use crate::text::hash_u64;

const DEFAULT_TERMS: &str = include_str!("../../data/sub_disciplines.txt");

/// Reference topics for unknown-knowledge injection, one term per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubDisciplineRegistry {
    terms: Vec<String>,
}

impl Default for SubDisciplineRegistry {
    /// The shipped list of 361 academic sub-disciplines.
    fn default() -> Self {
        Self::parse(DEFAULT_TERMS).expect("shipped registry is valid")
    }
}

impl SubDisciplineRegistry {
    pub fn new(terms: Vec<String>) -> Result<Self, InjectError> {
        let mut seen = HashSet::new();
        for t in &terms {
            if t.trim().is_empty() || t.trim() != t {
                return Err(InjectError::InvalidRegistry(format!("bad term {t:?}")));
            }
            if !seen.insert(t.as_str()) {
                return Err(InjectError::InvalidRegistry(format!("duplicate term {t:?}")));
            }
        }
        Ok(SubDisciplineRegistry { terms })
    }

    /// Parses one term per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, InjectError> {
        let terms = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        Self::new(terms)
    }

    pub fn load(path: &Path) -> Result<Self, InjectError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InjectError::InvalidRegistry(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn count(&self) -> usize {
        self.terms.len()
    }

    /// Draws two distinct terms uniformly without replacement. The generator
    /// is seeded from `(run_seed, memory_id)`, so the draw for a memory does
    /// not depend on processing order.
    pub fn sample_topics(&self, run_seed: u64, memory_id: &str) -> Result<[String; 2], InjectError> {
        if self.terms.len() < 2 {
            return Err(InjectError::RegistryTooSmall(self.terms.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(topic_seed(run_seed, memory_id));
        let picks = rand::seq::index::sample(&mut rng, self.terms.len(), 2);
        Ok([self.terms[picks.index(0)].clone(), self.terms[picks.index(1)].clone()])
    }
}

/// Per-memory generator seed.
pub fn topic_seed(run_seed: u64, memory_id: &str) -> u64 {
    hash_u64(format!("{run_seed}\u{1f}{memory_id}"))
}
