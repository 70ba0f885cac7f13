//! `rolecheck.toml`: endpoints, paths and seeds.
//!
//! ```toml
//! seed = 7
//! workers = 4
//! workspace = "work"             # stage outputs; relative to this file
//! template_dir = "templates"     # optional prompt overrides
//! cache_dir = "work/cache"       # optional; defaults to <workspace>/cache
//! mock_script = "mock.json"      # backs every endpoint whose base_url is mock://
//! registry = "topics.txt"        # optional sub-discipline list
//! case_bank = "cases.json"       # required by few_shot, rag_few_shot and s2rd
//!
//! [[endpoints]]
//! id = "gpt-4o"
//! base_url = "https://api.openai.com/v1"
//! model_name = "gpt-4o"
//! kind = "chat"
//!
//! [screening]
//! annotators = ["a1", "a2", "a3"]
//! required_annotators = 3
//!
//! [chunking]
//! target_sentences = 8
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use rolecheck_core::provider::ModelEndpoint;
use rolecheck_core::Error;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_workspace")]
    pub workspace: PathBuf,
    pub template_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub case_bank: Option<PathBuf>,
    #[serde(default)]
    pub endpoints: Vec<ModelEndpoint>,
    #[serde(default)]
    pub screening: ScreeningConfig,
    #[serde(default)]
    pub chunking: ChunkingConfig,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreeningConfig {
    #[serde(default)]
    pub annotators: Vec<String>,
    #[serde(default = "default_required")]
    pub required_annotators: usize,
    /// Allowed first words of transformed questions.
    pub interrogatives: Option<Vec<String>>,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        ScreeningConfig {
            annotators: vec![],
            required_annotators: default_required(),
            interrogatives: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkingConfig {
    #[serde(default = "default_target")]
    pub target_sentences: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        ChunkingConfig {
            target_sentences: default_target(),
        }
    }
}

fn default_seed() -> u64 {
    7
}
fn default_workers() -> usize {
    4
}
fn default_workspace() -> PathBuf {
    PathBuf::from("work")
}
fn default_required() -> usize {
    3
}
fn default_target() -> usize {
    8
}
fn default_timeout() -> u64 {
    120
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config parses")
    }
}

impl RunConfig {
    /// Loads `path`; a missing file is only an error when it was named
    /// explicitly. Relative paths are resolved against the file's directory.
    pub fn load(path: &Path, explicit: bool) -> Result<Self, Error> {
        if !path.exists() {
            if explicit {
                return Err(Error::Config(format!("config file {} not found", path.display())));
            }
            return Ok(RunConfig::default());
        }
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.workspace);
        for p in [
            &mut self.template_dir,
            &mut self.cache_dir,
            &mut self.mock_script,
            &mut self.registry,
            &mut self.case_bank,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let mut seen = BTreeMap::new();
        for ep in &self.endpoints {
            ep.validate()?;
            if seen.insert(ep.id.as_str(), ()).is_some() {
                return Err(Error::Config(format!("duplicate endpoint id '{}'", ep.id)));
            }
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn endpoint_map(&self) -> BTreeMap<String, ModelEndpoint> {
        self.endpoints.iter().map(|e| (e.id.clone(), e.clone())).collect()
    }
}
