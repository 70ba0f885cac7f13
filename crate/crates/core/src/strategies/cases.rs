use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StrategyError;
use crate::dataset::DatasetRecord;
use crate::taxonomy::ErrorType;

/// One worked example shown to the responder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub query: String,
    pub response: String,
    pub error_type: ErrorType,
}

impl Case {
    fn render(&self) -> String {
        format!("Question: {}\nResponse: {}", self.query.trim(), self.response.trim())
    }
}

/// Exactly four cases, two per error type, kept in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseBank {
    cases: Vec<Case>,
}

impl CaseBank {
    pub fn new(cases: Vec<Case>) -> Result<Self, StrategyError> {
        if cases.len() != 4 {
            return Err(StrategyError::Config(format!("case bank needs exactly 4 cases, got {}", cases.len())));
        }
        let kke = cases.iter().filter(|c| c.error_type == ErrorType::Kke).count();
        if kke != 2 {
            return Err(StrategyError::Config(format!(
                "case bank needs 2 kke and 2 uke cases, got {kke} kke"
            )));
        }
        if cases.iter().any(|c| c.query.trim().is_empty() || c.response.trim().is_empty()) {
            return Err(StrategyError::Config("case bank entries must be non-empty".into()));
        }
        Ok(CaseBank { cases })
    }

    /// Reads a JSON array of `{query, response, error_type}` objects.
    pub fn load(path: &Path) -> Result<Self, StrategyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StrategyError::Config(format!("{}: {e}", path.display())))?;
        let cases: Vec<Case> =
            serde_json::from_str(&text).map_err(|e| StrategyError::Config(format!("{}: {e}", path.display())))?;
        Self::new(cases)
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    /// Fails if any case question also appears in the evaluated dataset.
    pub fn check_overlap(&self, records: &[DatasetRecord]) -> Result<(), StrategyError> {
        let queries: HashSet<&str> = records.iter().map(|r| r.query.trim()).collect();
        match self.cases.iter().find(|c| queries.contains(c.query.trim())) {
            Some(c) => Err(StrategyError::CaseOverlap(c.query.clone())),
            None => Ok(()),
        }
    }

    /// The four `{caseN}` values.
    pub fn blocks(&self) -> [String; 4] {
        std::array::from_fn(|i| self.cases[i].render())
    }

    /// The single `{cases}` value: `Case1: ...` blocks separated by blank
    /// lines.
    pub fn joined(&self) -> String {
        self.cases
            .iter()
            .enumerate()
            .map(|(i, c)| format!("Case{}: {}", i + 1, c.render()))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}
