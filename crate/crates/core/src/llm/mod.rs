//! Chat-completion backends and structured-reply parsing.
//!
//! Every prompt carries a [`TaskEnvelope`]: a small JSON descriptor of what
//! is being asked (task, question, rubric version, answer ids, parameters).
//! It is embedded in the final user message as a fenced `task` block, so a
//! live model reads the natural-language instructions while the offline
//! backends ([`ScriptedBackend`], [`SimulatedBackend`]) answer from the
//! envelope alone.

mod envelope;
mod openai;
pub mod parse;
mod scripted;
mod simulated;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;

pub use envelope::{PromptBundle, Task, TaskEnvelope, ENVELOPE_FENCE};
pub use openai::{chat_request_body, OpenAiBackend};
pub use parse::{parse_structured, FlagReason, ParseError, Parsed, ParsedFlag, ParsedScore, Schema};
pub use scripted::{RecordingBackend, ScriptEntry, ScriptedBackend};
pub use simulated::{round_half_up, simulated_reply, Oracle, SimulatedBackend, revision_marker};

pub const DEFAULT_GRADING_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_RUBRIC_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;
pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication rejected (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("context length exceeded: {0}")]
    ContextLength(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    Response(String),
    #[error("scripted backend: {0}")]
    Script(String),
    #[error("simulated backend: {0}")]
    Simulation(String),
    #[error("invalid prompt bundle: {0}")]
    InvalidBundle(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub text: String,
    pub model: String,
    pub usage: Usage,
    pub latency: Duration,
}

/// A chat-completion provider. Implementations must be safe to call from
/// several threads at once.
pub trait Backend: Send + Sync {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError>;

    /// Model tag recorded alongside grades.
    fn model(&self) -> &str;

    /// Number of network requests issued so far. Offline backends never
    /// touch the network.
    fn network_attempts(&self) -> u64 {
        0
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        (**self).complete(bundle)
    }
    fn model(&self) -> &str {
        (**self).model()
    }
    fn network_attempts(&self) -> u64 {
        (**self).network_attempts()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        (**self).complete(bundle)
    }
    fn model(&self) -> &str {
        (**self).model()
    }
    fn network_attempts(&self) -> u64 {
        (**self).network_attempts()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    OpenaiCompatible,
    Scripted,
    Simulated,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "openai" | "openai_compatible" | "openai-compatible" => Ok(Self::OpenaiCompatible),
            "scripted" => Ok(Self::Scripted),
            "simulated" => Ok(Self::Simulated),
            other => Err(format!("unknown backend kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model: String,
    pub api_key_env: String,
    pub retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub seed: u64,
    /// Standard deviation of simulated grading noise, in points.
    pub noise_sigma: f64,
    /// Reply fixture for the scripted backend.
    pub fixture: Option<PathBuf>,
    pub parallelism: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Simulated,
            base_url: None,
            model: "gpt-4o".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            retries: 3,
            backoff_ms: 500,
            timeout_secs: 120,
            seed: 0,
            noise_sigma: 0.0,
            fixture: None,
            parallelism: DEFAULT_PARALLELISM,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.parallelism == 0 {
            return Err(LlmError::Config("parallelism must be at least 1".into()));
        }
        match self.kind {
            BackendKind::OpenaiCompatible => {
                if self.base_url.as_deref().is_none_or(str::is_empty) {
                    return Err(LlmError::Config("openai_compatible backend needs base_url".into()));
                }
                if self.api_key_env.is_empty() {
                    return Err(LlmError::Config("openai_compatible backend needs api_key_env".into()));
                }
            }
            BackendKind::Scripted => {
                if self.fixture.is_none() {
                    return Err(LlmError::Config("scripted backend needs a fixture file".into()));
                }
            }
            BackendKind::Simulated => {
                if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
                    return Err(LlmError::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
                }
            }
        }
        Ok(())
    }
}

/// Builds the backend described by `config`. The simulated backend draws
/// its ground truth from `oracle`.
pub fn build_backend(config: &BackendConfig, oracle: Option<&Corpus>) -> Result<Box<dyn Backend>, LlmError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::OpenaiCompatible => Box::new(OpenAiBackend::new(config.clone())?),
        BackendKind::Scripted => {
            let path = config.fixture.as_ref().expect("validated");
            Box::new(ScriptedBackend::from_fixture(path)?.with_model(&config.model))
        }
        BackendKind::Simulated => {
            let corpus = oracle.ok_or_else(|| LlmError::Config("simulated backend needs a corpus oracle".into()))?;
            Box::new(SimulatedBackend::new(Oracle::from_corpus(corpus), config.seed, config.noise_sigma))
        }
    })
}

/// Sends `bundle` through `backend` after validating it.
pub fn complete(bundle: &PromptBundle, backend: &dyn Backend) -> Result<LlmResponse, LlmError> {
    bundle.validate()?;
    let response = backend.complete(bundle)?;
    if response.text.is_empty() {
        return Err(LlmError::Response("empty completion text".into()));
    }
    Ok(response)
}

/// Maps `f` over `items` on at most `parallelism` threads. Output order
/// matches input order regardless of completion order.
pub fn parallel_map<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = parallelism.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<(usize, R)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= items.len() {
                            break;
                        }
                        local.push((i, f(&items[i])));
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    slots.sort_by_key(|(i, _)| *i);
    slots.into_iter().map(|(_, r)| r).collect()
}
