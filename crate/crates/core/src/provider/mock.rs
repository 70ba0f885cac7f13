//! Script-driven mock backend for offline runs and tests.
//!
//! Chat rules are tried in order against the request's user text; the first
//! match answers. A rule holds a list of outcomes consumed one per matching
//! call, with the last outcome repeating. Requests no rule matches fail with
//! [`BackendError::Unscripted`].
//!
//! Regex rules may reference capture groups in their replies (`$1`,
//! `${name}`), which lets one rule answer a whole family of prompts.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendReply, ChatRequest, ModelEndpoint, Usage};
use crate::text::hash_u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Exact(String),
    Prefix(String),
    Regex(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockOutcome {
    Reply(String),
    TransportError(String),
    Status(u16),
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRule {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    /// Restrict the rule to one endpoint id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Shorthand for a single `Reply` outcome.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcomes: Vec<MockOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRule {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmbeddingScript {
    #[serde(default)]
    pub rules: Vec<EmbedRule>,
    /// Unmatched texts get a deterministic hashed bag-of-words vector of this
    /// dimension. Without it, unmatched texts are an error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hashed_dim: Option<usize>,
    /// The first N embedding requests fail with a transport error.
    #[serde(default)]
    pub transport_failures: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub chat: Vec<ChatRule>,
    #[serde(default)]
    pub embedding: EmbeddingScript,
    /// Artificial latency per call, in milliseconds.
    #[serde(default)]
    pub latency_ms: u64,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on(mut self, matcher: Matcher, outcomes: Vec<MockOutcome>) -> Self {
        self.chat.push(ChatRule {
            matcher,
            endpoint: None,
            reply: None,
            outcomes,
        });
        self
    }

    pub fn on_exact(self, text: &str, reply: &str) -> Self {
        self.on(Matcher::Exact(text.into()), vec![MockOutcome::Reply(reply.into())])
    }

    pub fn on_prefix(self, prefix: &str, reply: &str) -> Self {
        self.on(Matcher::Prefix(prefix.into()), vec![MockOutcome::Reply(reply.into())])
    }

    pub fn on_regex(self, pattern: &str, reply: &str) -> Self {
        self.on(Matcher::Regex(pattern.into()), vec![MockOutcome::Reply(reply.into())])
    }

    pub fn embed_exact(mut self, text: &str, vector: Vec<f32>) -> Self {
        self.embedding.rules.push(EmbedRule {
            matcher: Matcher::Exact(text.into()),
            vector,
        });
        self
    }

    pub fn hashed_embeddings(mut self, dim: usize) -> Self {
        self.embedding.hashed_dim = Some(dim);
        self
    }

    pub fn latency(mut self, ms: u64) -> Self {
        self.latency_ms = ms;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockCall {
    Chat { endpoint: String, user_text: String },
    Embed { endpoint: String, texts: Vec<String> },
}

enum CompiledMatcher {
    Exact(String),
    Prefix(String),
    Regex(Regex),
}

impl CompiledMatcher {
    fn compile(m: &Matcher) -> Result<Self, regex::Error> {
        Ok(match m {
            Matcher::Exact(s) => CompiledMatcher::Exact(s.clone()),
            Matcher::Prefix(s) => CompiledMatcher::Prefix(s.clone()),
            Matcher::Regex(r) => CompiledMatcher::Regex(Regex::new(r)?),
        })
    }

    fn is_match(&self, text: &str) -> bool {
        match self {
            CompiledMatcher::Exact(s) => text == s,
            CompiledMatcher::Prefix(s) => text.starts_with(s.as_str()),
            CompiledMatcher::Regex(r) => r.is_match(text),
        }
    }

    fn expand(&self, text: &str, reply: &str) -> String {
        match self {
            CompiledMatcher::Regex(r) => {
                let caps = r.captures(text).expect("matched before expansion");
                let mut out = String::new();
                caps.expand(reply, &mut out);
                out
            }
            _ => reply.to_string(),
        }
    }
}

struct CompiledRule {
    matcher: CompiledMatcher,
    endpoint: Option<String>,
    outcomes: Vec<MockOutcome>,
    hits: AtomicUsize,
}

pub struct MockBackend {
    rules: Vec<CompiledRule>,
    embed_rules: Vec<(CompiledMatcher, Vec<f32>)>,
    hashed_dim: Option<usize>,
    embed_failures_left: Mutex<u32>,
    latency: Duration,
    log: Mutex<Vec<MockCall>>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

#[derive(Debug, thiserror::Error)]
pub enum MockError {
    #[error("invalid regex in mock script: {0}")]
    Regex(#[from] regex::Error),
    #[error("cannot read mock script {path}: {message}")]
    Load { path: String, message: String },
    #[error("chat rule {0} has no reply or outcomes")]
    EmptyRule(usize),
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, MockError> {
        let mut rules = Vec::new();
        for (i, rule) in script.chat.iter().enumerate() {
            let mut outcomes = rule.outcomes.clone();
            if let Some(reply) = &rule.reply {
                outcomes.push(MockOutcome::Reply(reply.clone()));
            }
            if outcomes.is_empty() {
                return Err(MockError::EmptyRule(i));
            }
            rules.push(CompiledRule {
                matcher: CompiledMatcher::compile(&rule.matcher)?,
                endpoint: rule.endpoint.clone(),
                outcomes,
                hits: AtomicUsize::new(0),
            });
        }
        let embed_rules = script
            .embedding
            .rules
            .iter()
            .map(|r| Ok((CompiledMatcher::compile(&r.matcher)?, r.vector.clone())))
            .collect::<Result<Vec<_>, regex::Error>>()?;
        Ok(MockBackend {
            rules,
            embed_rules,
            hashed_dim: script.embedding.hashed_dim,
            embed_failures_left: Mutex::new(script.embedding.transport_failures),
            latency: Duration::from_millis(script.latency_ms),
            log: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        })
    }

    /// Loads a JSON mock script.
    pub fn from_file(path: &Path) -> Result<Self, MockError> {
        let raw = std::fs::read_to_string(path).map_err(|e| MockError::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let script: MockScript = serde_json::from_str(&raw).map_err(|e| MockError::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::new(script)
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.log.lock().unwrap().clone()
    }

    pub fn chat_calls(&self) -> usize {
        self.calls().iter().filter(|c| matches!(c, MockCall::Chat { .. })).count()
    }

    pub fn embed_calls(&self) -> usize {
        self.calls().iter().filter(|c| matches!(c, MockCall::Embed { .. })).count()
    }

    /// Highest number of simultaneously executing calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    fn enter(&self, call: MockCall) -> InFlight<'_> {
        self.log.lock().unwrap().push(call);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        InFlight(&self.in_flight)
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Deterministic hashed bag-of-words embedding.
pub fn hashed_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut v = vec![0.0f32; dim];
    let lower = text.to_lowercase();
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let h = hash_u64(token);
        let idx = (h % dim as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        v[idx] += sign;
    }
    v
}

fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

impl Backend for MockBackend {
    fn chat(&self, endpoint: &ModelEndpoint, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let _guard = self.enter(MockCall::Chat {
            endpoint: endpoint.id.clone(),
            user_text: request.user_text.clone(),
        });
        let text = &request.user_text;
        let rule = self
            .rules
            .iter()
            .filter(|r| r.endpoint.as_deref().is_none_or(|e| e == endpoint.id))
            .find(|r| r.matcher.is_match(text))
            .ok_or_else(|| {
                let head: String = text.chars().take(120).collect();
                BackendError::Unscripted(format!("chat on {}: {head}", endpoint.id))
            })?;
        let n = rule.hits.fetch_add(1, Ordering::SeqCst);
        let outcome = &rule.outcomes[n.min(rule.outcomes.len() - 1)];
        match outcome {
            MockOutcome::Reply(reply) => {
                let text_out = rule.matcher.expand(text, reply);
                Ok(BackendReply {
                    usage: Usage {
                        prompt_tokens: approx_tokens(&request.system_text) + approx_tokens(text),
                        completion_tokens: approx_tokens(&text_out),
                    },
                    text: text_out,
                })
            }
            MockOutcome::TransportError(msg) => Err(BackendError::Transport(msg.clone())),
            MockOutcome::Status(code) => Err(BackendError::Status {
                code: *code,
                body: "scripted status".into(),
            }),
            MockOutcome::Empty => Ok(BackendReply {
                text: String::new(),
                usage: Usage::default(),
            }),
        }
    }

    fn embed(&self, endpoint: &ModelEndpoint, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let _guard = self.enter(MockCall::Embed {
            endpoint: endpoint.id.clone(),
            texts: texts.to_vec(),
        });
        {
            let mut left = self.embed_failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(BackendError::Transport("scripted embedding failure".into()));
            }
        }
        texts
            .iter()
            .map(|t| {
                if let Some((_, v)) = self.embed_rules.iter().find(|(m, _)| m.is_match(t)) {
                    return Ok(v.clone());
                }
                match self.hashed_dim {
                    Some(dim) => Ok(hashed_embedding(t, dim)),
                    None => Err(BackendError::Unscripted(format!("embed on {}: {t}", endpoint.id))),
                }
            })
            .collect()
    }
}
