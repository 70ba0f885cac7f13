//! OpenAI-compatible HTTP backend.
//!
//! `POST {base_url}/chat/completions` and `POST {base_url}/embeddings`.
//! The bearer token comes from `ROLECHECK_API_KEY_<ID>` (endpoint id
//! upper-cased, non-alphanumerics replaced by `_`) or `ROLECHECK_API_KEY`.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendError, BackendReply, ChatRequest, ModelEndpoint, Usage};

pub const API_KEY_VAR: &str = "ROLECHECK_API_KEY";

pub struct HttpBackend {
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend { client })
    }
}

pub fn api_key_var(endpoint_id: &str) -> String {
    let suffix: String = endpoint_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("{API_KEY_VAR}_{suffix}")
}

fn api_key(endpoint_id: &str) -> Option<String> {
    std::env::var(api_key_var(endpoint_id))
        .ok()
        .or_else(|| std::env::var(API_KEY_VAR).ok())
        .filter(|k| !k.is_empty())
}

fn url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

pub fn chat_body(endpoint: &ModelEndpoint, request: &ChatRequest) -> serde_json::Value {
    json!({
        "model": endpoint.model_name,
        "messages": [
            {"role": "system", "content": request.system_text},
            {"role": "user", "content": request.user_text},
        ],
        "temperature": request.params.temperature,
    })
}

pub fn embeddings_body(endpoint: &ModelEndpoint, texts: &[String]) -> serde_json::Value {
    json!({"model": endpoint.model_name, "input": texts})
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: usize,
    embedding: Vec<f32>,
}

pub fn parse_chat_response(raw: &str) -> Result<BackendReply, BackendError> {
    let parsed: ChatResponse =
        serde_json::from_str(raw).map_err(|e| BackendError::Transport(format!("malformed response: {e}")))?;
    let text = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .unwrap_or_default();
    let usage = parsed
        .usage
        .map(|u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        })
        .unwrap_or_default();
    Ok(BackendReply { text, usage })
}

pub fn parse_embedding_response(raw: &str) -> Result<Vec<Vec<f32>>, BackendError> {
    let mut parsed: EmbeddingResponse =
        serde_json::from_str(raw).map_err(|e| BackendError::Transport(format!("malformed response: {e}")))?;
    parsed.data.sort_by_key(|d| d.index);
    Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
}

impl HttpBackend {
    fn post(&self, endpoint: &ModelEndpoint, path: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        let mut req = self.client.post(url(&endpoint.base_url, path)).json(body);
        if let Some(key) = api_key(&endpoint.id) {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                code: status.as_u16(),
                body: text,
            });
        }
        Ok(text)
    }
}

impl Backend for HttpBackend {
    fn chat(&self, endpoint: &ModelEndpoint, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let raw = self.post(endpoint, "chat/completions", &chat_body(endpoint, request))?;
        parse_chat_response(&raw)
    }

    fn embed(&self, endpoint: &ModelEndpoint, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let raw = self.post(endpoint, "embeddings", &embeddings_body(endpoint, texts))?;
        parse_embedding_response(&raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::ChatParams;

    #[test]
    fn key_var_name() {
        assert_eq!(api_key_var("judge-ds"), "ROLECHECK_API_KEY_JUDGE_DS");
    }

    #[test]
    fn chat_body_shape() {
        let ep = ModelEndpoint::chat("r", "http://x/v1/", "gpt");
        let body = chat_body(
            &ep,
            &ChatRequest {
                system_text: "s".into(),
                user_text: "u".into(),
                params: ChatParams::default(),
            },
        );
        assert_eq!(body["model"], "gpt");
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["messages"][1]["content"], "u");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(url(&ep.base_url, "embeddings"), "http://x/v1/embeddings");
    }

    #[test]
    fn parses_responses() {
        let reply = parse_chat_response(
            r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#,
        )
        .unwrap();
        assert_eq!(reply.text, "hi");
        assert_eq!(reply.usage.prompt_tokens, 3);
        let vecs = parse_embedding_response(
            r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#,
        )
        .unwrap();
        assert_eq!(vecs, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }
}
