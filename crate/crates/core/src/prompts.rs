//! Prompt templates and `{placeholder}` substitution.
//!
//! Shipped defaults are compiled in from `templates/`. A template directory
//! can override any of them file-by-file (same file names).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;

use crate::taxonomy::{ErrorType, MemoryCategory};
use crate::text::sha256_hex;

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([a-z][a-z0-9_]*)\}").unwrap());

/// System text for dataset-construction and judge calls, whose templates are
/// self-contained user messages.
pub const ASSISTANT_SYSTEM: &str = "You are a helpful assistant.";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error("template '{template}' has no value for placeholder {{{placeholder}}}")]
    MissingValue { template: String, placeholder: String },
    #[error("template '{template}' has no placeholder {{{placeholder}}} for the supplied value")]
    UnusedValue { template: String, placeholder: String },
    #[error("cannot read template {path}: {message}")]
    Load { path: String, message: String },
}

impl PromptError {
    pub fn name(&self) -> &'static str {
        match self {
            PromptError::MissingValue { .. } => "MissingValue",
            PromptError::UnusedValue { .. } => "UnusedValue",
            PromptError::Load { .. } => "TemplateLoadError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateId {
    Memgen,
    KkeInject,
    KkeBlock(MemoryCategory),
    UkeInject,
    UkeBlock(MemoryCategory),
    ToQuestion,
    JudgeKke,
    JudgeUke,
    Vanilla,
    Cot,
    FewShot,
    Rag,
    RagFewShot,
    SelfReflection,
    S2rdNarrative,
    S2rdRecollection,
    S2rdDoubt,
    S2rdFinal,
}

impl TemplateId {
    pub fn all() -> Vec<TemplateId> {
        let mut ids = vec![TemplateId::Memgen, TemplateId::KkeInject];
        ids.extend(MemoryCategory::ALL.map(TemplateId::KkeBlock));
        ids.push(TemplateId::UkeInject);
        ids.extend(MemoryCategory::ALL.map(TemplateId::UkeBlock));
        ids.extend([
            TemplateId::ToQuestion,
            TemplateId::JudgeKke,
            TemplateId::JudgeUke,
            TemplateId::Vanilla,
            TemplateId::Cot,
            TemplateId::FewShot,
            TemplateId::Rag,
            TemplateId::RagFewShot,
            TemplateId::SelfReflection,
            TemplateId::S2rdNarrative,
            TemplateId::S2rdRecollection,
            TemplateId::S2rdDoubt,
            TemplateId::S2rdFinal,
        ]);
        ids
    }

    pub fn file_stem(self) -> String {
        match self {
            TemplateId::Memgen => "memgen".into(),
            TemplateId::KkeInject => "kke_inject".into(),
            TemplateId::KkeBlock(c) => format!("kke_{}_block", c.as_str()),
            TemplateId::UkeInject => "uke_inject".into(),
            TemplateId::UkeBlock(c) => format!("uke_{}_block", c.as_str()),
            TemplateId::ToQuestion => "to_question".into(),
            TemplateId::JudgeKke => "judge_kke".into(),
            TemplateId::JudgeUke => "judge_uke".into(),
            TemplateId::Vanilla => "vanilla".into(),
            TemplateId::Cot => "cot".into(),
            TemplateId::FewShot => "few_shot".into(),
            TemplateId::Rag => "rag".into(),
            TemplateId::RagFewShot => "rag_few_shot".into(),
            TemplateId::SelfReflection => "self_reflection".into(),
            TemplateId::S2rdNarrative => "s2rd_narrative".into(),
            TemplateId::S2rdRecollection => "s2rd_recollection".into(),
            TemplateId::S2rdDoubt => "s2rd_doubt".into(),
            TemplateId::S2rdFinal => "s2rd_final".into(),
        }
    }

    fn default_text(self) -> &'static str {
        use MemoryCategory::*;
        match self {
            TemplateId::Memgen => include_str!("../templates/memgen.txt"),
            TemplateId::KkeInject => include_str!("../templates/kke_inject.txt"),
            TemplateId::KkeBlock(Event) => include_str!("../templates/kke_event_block.txt"),
            TemplateId::KkeBlock(Relational) => include_str!("../templates/kke_relational_block.txt"),
            TemplateId::KkeBlock(Attitudinal) => include_str!("../templates/kke_attitudinal_block.txt"),
            TemplateId::KkeBlock(Identity) => include_str!("../templates/kke_identity_block.txt"),
            TemplateId::UkeInject => include_str!("../templates/uke_inject.txt"),
            TemplateId::UkeBlock(Event) => include_str!("../templates/uke_event_block.txt"),
            TemplateId::UkeBlock(Relational) => include_str!("../templates/uke_relational_block.txt"),
            TemplateId::UkeBlock(Attitudinal) => include_str!("../templates/uke_attitudinal_block.txt"),
            TemplateId::UkeBlock(Identity) => include_str!("../templates/uke_identity_block.txt"),
            TemplateId::ToQuestion => include_str!("../templates/to_question.txt"),
            TemplateId::JudgeKke => include_str!("../templates/judge_kke.txt"),
            TemplateId::JudgeUke => include_str!("../templates/judge_uke.txt"),
            TemplateId::Vanilla => include_str!("../templates/vanilla.txt"),
            TemplateId::Cot => include_str!("../templates/cot.txt"),
            TemplateId::FewShot => include_str!("../templates/few_shot.txt"),
            TemplateId::Rag => include_str!("../templates/rag.txt"),
            TemplateId::RagFewShot => include_str!("../templates/rag_few_shot.txt"),
            TemplateId::SelfReflection => include_str!("../templates/self_reflection.txt"),
            TemplateId::S2rdNarrative => include_str!("../templates/s2rd_narrative.txt"),
            TemplateId::S2rdRecollection => include_str!("../templates/s2rd_recollection.txt"),
            TemplateId::S2rdDoubt => include_str!("../templates/s2rd_doubt.txt"),
            TemplateId::S2rdFinal => include_str!("../templates/s2rd_final.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.file_stem())
    }
}

/// Returns every `{placeholder}` name in `text`, in order of appearance.
pub fn placeholders(text: &str) -> Vec<String> {
    PLACEHOLDER
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect()
}

/// Substitutes `{name}` placeholders in one pass. Substituted values are never
/// rescanned, so a value containing braces stays literal.
pub fn render(name: &str, template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut used = BTreeSet::new();
    let mut out = String::with_capacity(template.len() + 256);
    let mut last = 0;
    for caps in PLACEHOLDER.captures_iter(template) {
        let whole = caps.get(0).unwrap();
        let key = &caps[1];
        let value = values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| PromptError::MissingValue {
                template: name.to_string(),
                placeholder: key.to_string(),
            })?;
        out.push_str(&template[last..whole.start()]);
        out.push_str(value);
        used.insert(key.to_string());
        last = whole.end();
    }
    out.push_str(&template[last..]);
    if let Some((k, _)) = values.iter().find(|(k, _)| !used.contains(*k)) {
        return Err(PromptError::UnusedValue {
            template: name.to_string(),
            placeholder: k.to_string(),
        });
    }
    Ok(out)
}

/// The full set of prompt templates in use for a run.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    texts: BTreeMap<TemplateId, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let texts = TemplateId::all()
            .into_iter()
            .map(|id| (id, id.default_text().to_string()))
            .collect();
        TemplateSet { texts }
    }
}

impl TemplateSet {
    /// Shipped defaults, overridden by any `<stem>.txt` present in `dir`.
    /// One trailing newline in an override file is ignored.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let mut set = TemplateSet::default();
        for id in TemplateId::all() {
            let path = dir.join(format!("{}.txt", id.file_stem()));
            if path.exists() {
                let mut text = std::fs::read_to_string(&path).map_err(|e| PromptError::Load {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                if text.ends_with('\n') {
                    text.pop();
                    if text.ends_with('\r') {
                        text.pop();
                    }
                }
                set.texts.insert(id, text);
            }
        }
        Ok(set)
    }

    pub fn text(&self, id: TemplateId) -> &str {
        &self.texts[&id]
    }

    /// SHA-256 of every template, keyed by file stem; recorded in manifests.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.texts
            .iter()
            .map(|(id, text)| (id.file_stem(), sha256_hex(text)))
            .collect()
    }

    fn fill(&self, id: TemplateId, values: &[(&str, &str)]) -> Result<String, PromptError> {
        render(&id.file_stem(), self.text(id), values)
    }

    pub fn memgen(&self, role_name: &str, memory_chunk: &str) -> Result<String, PromptError> {
        self.fill(
            TemplateId::Memgen,
            &[("role_name", role_name), ("memory_chunk", memory_chunk)],
        )
    }

    pub fn kke_inject(
        &self,
        role_name: &str,
        category: MemoryCategory,
        correct_memory: &str,
    ) -> Result<String, PromptError> {
        let block = self.fill(TemplateId::KkeBlock(category), &[("role_name", role_name)])?;
        self.fill(
            TemplateId::KkeInject,
            &[
                ("role_name", role_name),
                ("memory_category", category.label()),
                ("correct_memory", correct_memory),
                ("memory_explanation", &block),
            ],
        )
    }

    pub fn uke_inject(
        &self,
        role_name: &str,
        category: MemoryCategory,
        correct_memory: &str,
        topic1: &str,
        topic2: &str,
    ) -> Result<String, PromptError> {
        let block = self.fill(TemplateId::UkeBlock(category), &[("role_name", role_name)])?;
        self.fill(
            TemplateId::UkeInject,
            &[
                ("role_name", role_name),
                ("memory_category", category.label()),
                ("correct_memory", correct_memory),
                ("memory_explanation", &block),
                ("topic1", topic1),
                ("topic2", topic2),
            ],
        )
    }

    pub fn to_question(&self, role_name: &str, manipulate_memory: &str) -> Result<String, PromptError> {
        self.fill(
            TemplateId::ToQuestion,
            &[("role_name", role_name), ("manipulate_memory", manipulate_memory)],
        )
    }

    pub fn judge(
        &self,
        error_type: ErrorType,
        role_name: &str,
        correct_memory: &str,
        given_query: &str,
        given_response: &str,
    ) -> Result<String, PromptError> {
        let id = match error_type {
            ErrorType::Kke => TemplateId::JudgeKke,
            ErrorType::Uke => TemplateId::JudgeUke,
        };
        self.fill(
            id,
            &[
                ("role_name", role_name),
                ("correct_memory", correct_memory),
                ("given_query", given_query),
                ("given_response", given_response),
            ],
        )
    }

    pub fn vanilla(&self, role_name: &str, given_query: &str) -> Result<String, PromptError> {
        self.fill(
            TemplateId::Vanilla,
            &[("role_name", role_name), ("given_query", given_query)],
        )
    }

    pub fn cot(&self, role_name: &str, given_query: &str) -> Result<String, PromptError> {
        self.fill(TemplateId::Cot, &[("role_name", role_name), ("given_query", given_query)])
    }

    pub fn few_shot(
        &self,
        role_name: &str,
        cases: &[String; 4],
        given_query: &str,
    ) -> Result<String, PromptError> {
        self.fill(
            TemplateId::FewShot,
            &[
                ("role_name", role_name),
                ("case1", &cases[0]),
                ("case2", &cases[1]),
                ("case3", &cases[2]),
                ("case4", &cases[3]),
                ("given_query", given_query),
            ],
        )
    }

    pub fn rag(&self, role_name: &str, rag_information: &str, given_query: &str) -> Result<String, PromptError> {
        self.fill(
            TemplateId::Rag,
            &[
                ("role_name", role_name),
                ("rag_information", rag_information),
                ("given_query", given_query),
            ],
        )
    }

    pub fn rag_few_shot(
        &self,
        role_name: &str,
        rag_information: &str,
        cases: &[String; 4],
        given_query: &str,
    ) -> Result<String, PromptError> {
        self.fill(
            TemplateId::RagFewShot,
            &[
                ("role_name", role_name),
                ("rag_information", rag_information),
                ("case1", &cases[0]),
                ("case2", &cases[1]),
                ("case3", &cases[2]),
                ("case4", &cases[3]),
                ("given_query", given_query),
            ],
        )
    }

    pub fn self_reflection(
        &self,
        role_name: &str,
        self_response: &str,
        given_query: &str,
    ) -> Result<String, PromptError> {
        self.fill(
            TemplateId::SelfReflection,
            &[
                ("role_name", role_name),
                ("self_response", self_response),
                ("given_query", given_query),
            ],
        )
    }

    pub fn s2rd_narrative(&self, role_name: &str) -> Result<String, PromptError> {
        self.fill(TemplateId::S2rdNarrative, &[("role_name", role_name)])
    }

    pub fn s2rd_recollection(
        &self,
        role_name: &str,
        self_narrative: &str,
        given_query: &str,
    ) -> Result<String, PromptError> {
        self.fill(
            TemplateId::S2rdRecollection,
            &[
                ("role_name", role_name),
                ("self_narrative", self_narrative),
                ("given_query", given_query),
            ],
        )
    }

    pub fn s2rd_doubt(
        &self,
        role_name: &str,
        self_narrative: &str,
        self_rag: &str,
        given_query: &str,
    ) -> Result<String, PromptError> {
        self.fill(
            TemplateId::S2rdDoubt,
            &[
                ("role_name", role_name),
                ("self_narrative", self_narrative),
                ("self_rag", self_rag),
                ("given_query", given_query),
            ],
        )
    }

    pub fn s2rd_final(
        &self,
        role_name: &str,
        self_narrative: &str,
        self_rag: &str,
        cases: &str,
        self_doubt: &str,
        given_query: &str,
    ) -> Result<String, PromptError> {
        self.fill(
            TemplateId::S2rdFinal,
            &[
                ("role_name", role_name),
                ("self_narrative", self_narrative),
                ("self_rag", self_rag),
                ("cases", cases),
                ("self_doubt", self_doubt),
                ("given_query", given_query),
            ],
        )
    }
}
