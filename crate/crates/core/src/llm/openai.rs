//! Blocking client for OpenAI-compatible `/chat/completions` endpoints.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{Backend, BackendConfig, LlmError, LlmResponse, PromptBundle, Usage};

/// Request body for a bundle: system message first, then user turns.
pub fn chat_request_body(model: &str, bundle: &PromptBundle) -> Value {
    let mut messages = Vec::with_capacity(bundle.user_messages.len() + 1);
    if !bundle.system.is_empty() {
        messages.push(json!({ "role": "system", "content": bundle.system }));
    }
    for m in &bundle.user_messages {
        messages.push(json!({ "role": "user", "content": m }));
    }
    json!({
        "model": model,
        "messages": messages,
        "temperature": bundle.temperature,
        "max_tokens": bundle.max_tokens,
    })
}

fn looks_like_context_overflow(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    lower.contains("context_length_exceeded")
        || lower.contains("maximum context length")
        || lower.contains("context length")
        || lower.contains("too many tokens")
}

enum Attempt {
    Done(LlmResponse),
    Retry(LlmError),
    Fail(LlmError),
}

pub struct OpenAiBackend {
    config: BackendConfig,
    agent: ureq::Agent,
    attempts: AtomicU64,
}

impl OpenAiBackend {
    pub fn new(config: BackendConfig) -> Result<Self, LlmError> {
        if config.base_url.is_none() {
            return Err(LlmError::Config("openai_compatible backend needs base_url".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .build()
            .into();
        Ok(OpenAiBackend { config, agent, attempts: AtomicU64::new(0) })
    }

    fn endpoint(&self) -> String {
        let base = self.config.base_url.as_deref().unwrap_or_default();
        format!("{}/chat/completions", base.trim_end_matches('/'))
    }

    fn attempt(&self, url: &str, key: &str, body: &Value) -> Attempt {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let start = Instant::now();
        let sent = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {key}"))
            .header("Content-Type", "application/json")
            .send_json(body);
        let mut response = match sent {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(LlmError::Transport(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(LlmError::Transport(e.to_string())),
        };
        match status {
            200..=299 => Attempt::Done(match parse_completion(&text, start.elapsed()) {
                Ok(r) => r,
                Err(e) => return Attempt::Fail(e),
            }),
            401 | 403 => Attempt::Fail(LlmError::Auth { status, body: text }),
            400 | 413 if looks_like_context_overflow(&text) => Attempt::Fail(LlmError::ContextLength(text)),
            408 | 429 | 500..=599 => Attempt::Retry(LlmError::Http { status, body: text }),
            _ => Attempt::Fail(LlmError::Http { status, body: text }),
        }
    }
}

fn parse_completion(text: &str, latency: Duration) -> Result<LlmResponse, LlmError> {
    let value: Value = serde_json::from_str(text).map_err(|e| LlmError::Response(e.to_string()))?;
    let content = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::Response("missing choices[0].message.content".into()))?;
    if content.is_empty() {
        return Err(LlmError::Response("empty completion text".into()));
    }
    let usage = value
        .get("usage")
        .map(|u| Usage {
            prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
        })
        .unwrap_or_default();
    Ok(LlmResponse {
        text: content.to_string(),
        model: value.get("model").and_then(Value::as_str).unwrap_or_default().to_string(),
        usage,
        latency,
    })
}

impl Backend for OpenAiBackend {
    /// Issues at most `retries + 1` requests. Transport failures, 408, 429
    /// and 5xx are retried with exponential backoff; authentication and
    /// other client errors are returned immediately.
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        let key = std::env::var(&self.config.api_key_env).map_err(|_| {
            LlmError::Config(format!("environment variable `{}` is not set", self.config.api_key_env))
        })?;
        let url = self.endpoint();
        let body = chat_request_body(&self.config.model, bundle);
        let mut last = None;
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(&url, &key, &body) {
                Attempt::Done(mut r) => {
                    if r.model.is_empty() {
                        r.model = self.config.model.clone();
                    }
                    return Ok(r);
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("chat completion attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or_else(|| LlmError::Transport("no attempt made".into())))
    }

    fn model(&self) -> &str {
        &self.config.model
    }

    fn network_attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Task, TaskEnvelope};

    #[test]
    fn body_shape() {
        let env = TaskEnvelope::new(Task::Grade, "q", 0, vec!["a".into()]);
        let bundle = PromptBundle::new("sys", vec!["hi".into()], env, 0.0, 64).unwrap();
        let body = chat_request_body("m", &bundle);
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 64);
    }

    #[test]
    fn completion_parsing() {
        let ok = r#"{"model":"x","choices":[{"message":{"role":"assistant","content":"hello"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;
        let r = parse_completion(ok, Duration::ZERO).unwrap();
        assert_eq!(r.text, "hello");
        assert_eq!(r.usage.prompt_tokens, 3);
        assert!(parse_completion(r#"{"choices":[]}"#, Duration::ZERO).is_err());
        assert!(looks_like_context_overflow(r#"{"error":{"code":"context_length_exceeded"}}"#));
    }
}
