use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{BackendReply, ChatRequest, ModelEndpoint, ProviderError, Usage};
use crate::text::sha256_hex;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Entry {
    Chat { text: String, usage: Usage },
    Embedding { values: Vec<f32> },
}

/// Stable key over everything that determines a chat response.
pub(super) fn chat_key(endpoint: &ModelEndpoint, request: &ChatRequest) -> String {
    let material = serde_json::json!([
        "chat",
        endpoint.id,
        endpoint.model_name,
        request.system_text,
        request.user_text,
        request.params.temperature.to_bits(),
        request.params.trial,
        request.params.attempt,
    ]);
    sha256_hex(material.to_string())
}

pub(super) fn embed_key(endpoint: &ModelEndpoint, text: &str) -> String {
    let material = serde_json::json!(["embed", endpoint.id, endpoint.model_name, sha256_hex(text)]);
    sha256_hex(material.to_string())
}

/// Response cache, optionally persisted as one JSON file per key so an
/// interrupted run resumes where it stopped.
pub struct ResponseCache {
    memory: RwLock<HashMap<String, Entry>>,
    dir: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            memory: RwLock::new(HashMap::new()),
            dir: None,
        }
    }

    pub fn on_disk(dir: PathBuf) -> Result<Self, ProviderError> {
        fs::create_dir_all(&dir).map_err(|e| ProviderError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(ResponseCache {
            memory: RwLock::new(HashMap::new()),
            dir: Some(dir),
        })
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(format!("{key}.json")))
    }

    fn get(&self, key: &str) -> Result<Option<Entry>, ProviderError> {
        if let Some(e) = self.memory.read().unwrap().get(key) {
            return Ok(Some(e.clone()));
        }
        let Some(path) = self.path(key) else {
            return Ok(None);
        };
        match fs::read_to_string(&path) {
            Ok(raw) => {
                let entry: Entry = serde_json::from_str(&raw)
                    .map_err(|e| ProviderError::Cache(format!("{}: {e}", path.display())))?;
                self.memory.write().unwrap().insert(key.to_string(), entry.clone());
                Ok(Some(entry))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ProviderError::Cache(format!("{}: {e}", path.display()))),
        }
    }

    fn put(&self, key: &str, entry: Entry) -> Result<(), ProviderError> {
        if let Some(path) = self.path(key) {
            let parent = path.parent().expect("cache path has a parent");
            fs::create_dir_all(parent).map_err(|e| ProviderError::Cache(e.to_string()))?;
            // unique temp name so concurrent writers of one key never interleave
            let tmp = path.with_extension(format!(
                "tmp{}-{:?}",
                std::process::id(),
                std::thread::current().id()
            ));
            let raw = serde_json::to_string(&entry).map_err(|e| ProviderError::Cache(e.to_string()))?;
            fs::write(&tmp, raw).map_err(|e| ProviderError::Cache(e.to_string()))?;
            fs::rename(&tmp, &path).map_err(|e| ProviderError::Cache(e.to_string()))?;
        }
        self.memory.write().unwrap().insert(key.to_string(), entry);
        Ok(())
    }

    pub(super) fn get_chat(&self, key: &str) -> Result<Option<BackendReply>, ProviderError> {
        Ok(match self.get(key)? {
            Some(Entry::Chat { text, usage }) => Some(BackendReply { text, usage }),
            _ => None,
        })
    }

    pub(super) fn put_chat(&self, key: &str, reply: &BackendReply) -> Result<(), ProviderError> {
        self.put(
            key,
            Entry::Chat {
                text: reply.text.clone(),
                usage: reply.usage,
            },
        )
    }

    pub(super) fn get_embedding(&self, key: &str) -> Result<Option<Vec<f32>>, ProviderError> {
        Ok(match self.get(key)? {
            Some(Entry::Embedding { values }) => Some(values),
            _ => None,
        })
    }

    pub(super) fn put_embedding(&self, key: &str, values: &[f32]) -> Result<(), ProviderError> {
        self.put(
            key,
            Entry::Embedding {
                values: values.to_vec(),
            },
        )
    }
}
