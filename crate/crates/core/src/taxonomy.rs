use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The four memory categories used to label character knowledge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryCategory {
    Event,
    Relational,
    Attitudinal,
    Identity,
}

impl MemoryCategory {
    pub const ALL: [MemoryCategory; 4] = [
        MemoryCategory::Event,
        MemoryCategory::Relational,
        MemoryCategory::Attitudinal,
        MemoryCategory::Identity,
    ];

    /// Label as printed inside brackets in model output, e.g. `Event Memory`.
    pub fn label(self) -> &'static str {
        match self {
            MemoryCategory::Event => "Event Memory",
            MemoryCategory::Relational => "Relational Memory",
            MemoryCategory::Attitudinal => "Attitudinal Memory",
            MemoryCategory::Identity => "Identity Memory",
        }
    }

    /// Column header used in result tables.
    pub fn short(self) -> &'static str {
        match self {
            MemoryCategory::Event => "Eve.",
            MemoryCategory::Relational => "Rel.",
            MemoryCategory::Attitudinal => "Att.",
            MemoryCategory::Identity => "Ide.",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MemoryCategory::Event => "event",
            MemoryCategory::Relational => "relational",
            MemoryCategory::Attitudinal => "attitudinal",
            MemoryCategory::Identity => "identity",
        }
    }
}

impl fmt::Display for MemoryCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MemoryCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "event" => Ok(MemoryCategory::Event),
            "relational" => Ok(MemoryCategory::Relational),
            "attitudinal" => Ok(MemoryCategory::Attitudinal),
            "identity" => Ok(MemoryCategory::Identity),
            other => Err(format!("unknown memory category '{other}'")),
        }
    }
}

/// Known-knowledge error (correctable) or unknown-knowledge error (beyond the
/// character's cognition).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    Kke,
    Uke,
}

impl ErrorType {
    pub const ALL: [ErrorType; 2] = [ErrorType::Kke, ErrorType::Uke];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorType::Kke => "kke",
            ErrorType::Uke => "uke",
        }
    }

    pub fn upper(self) -> &'static str {
        match self {
            ErrorType::Kke => "KKE",
            ErrorType::Uke => "UKE",
        }
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kke" => Ok(ErrorType::Kke),
            "uke" => Ok(ErrorType::Uke),
            other => Err(format!("unknown error type '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreeningStatus {
    #[default]
    Pending,
    Kept,
    Rejected,
}
