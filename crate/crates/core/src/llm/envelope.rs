use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::LlmError;

/// Info string of the fenced block that carries the envelope.
pub const ENVELOPE_FENCE: &str = "task";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GenerateRubric,
    Grade,
    Review,
}

/// Machine-readable descriptor of a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnvelope {
    pub task: Task,
    pub question_id: String,
    pub rubric_version: u32,
    #[serde(default)]
    pub answer_ids: Vec<String>,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl TaskEnvelope {
    pub fn new(task: Task, question_id: &str, rubric_version: u32, answer_ids: Vec<String>) -> Self {
        TaskEnvelope { task, question_id: question_id.to_string(), rubric_version, answer_ids, params: BTreeMap::new() }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn param_u64(&self, key: &str) -> Option<u64> {
        self.params.get(key).and_then(Value::as_u64)
    }

    pub fn param_str(&self, key: &str) -> Option<&str> {
        self.params.get(key).and_then(Value::as_str)
    }

    /// Canonical single-line JSON. Field order is fixed and params are a
    /// sorted map, so equal envelopes always render identically.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("envelope is always serializable")
    }

    /// Hex SHA-256 of the canonical JSON; keys scripted replies.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn to_block(&self) -> String {
        format!("```{ENVELOPE_FENCE}\n{}\n```", self.canonical_json())
    }

    /// Recovers the envelope embedded in a prompt text, if any.
    pub fn extract(text: &str) -> Option<TaskEnvelope> {
        let open = format!("```{ENVELOPE_FENCE}\n");
        let start = text.rfind(&open)? + open.len();
        let end = start + text[start..].find("\n```")?;
        serde_json::from_str(&text[start..end]).ok()
    }
}

/// A fully bound message sequence plus its envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user_messages: Vec<String>,
    pub task_envelope: TaskEnvelope,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl PromptBundle {
    /// Binds the messages, appending the envelope block to the last user
    /// message.
    pub fn new(
        system: impl Into<String>,
        mut user_messages: Vec<String>,
        envelope: TaskEnvelope,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<Self, LlmError> {
        let block = envelope.to_block();
        match user_messages.last_mut() {
            Some(last) => {
                last.push_str("\n\n");
                last.push_str(&block);
            }
            None => user_messages.push(block),
        }
        let bundle = PromptBundle { system: system.into(), user_messages, task_envelope: envelope, temperature, max_tokens };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let env = &self.task_envelope;
        if matches!(env.task, Task::Grade | Task::Review) && env.answer_ids.is_empty() {
            return Err(LlmError::InvalidBundle(format!("{:?} envelope lists no answers", env.task)));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::InvalidBundle(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidBundle("max_tokens must be positive".into()));
        }
        let last = self.user_messages.last().ok_or_else(|| LlmError::InvalidBundle("no user message".into()))?;
        if !last.ends_with(&env.to_block()) {
            return Err(LlmError::InvalidBundle("final user message does not end with the task envelope".into()));
        }
        Ok(())
    }

    /// Total characters across all messages; the context-budget proxy.
    pub fn char_len(&self) -> usize {
        self.system.chars().count() + self.user_messages.iter().map(|m| m.chars().count()).sum::<usize>()
    }

    /// Same conversation with one more user turn and an updated envelope.
    pub fn follow_up(&self, message: String, envelope: TaskEnvelope) -> Result<PromptBundle, LlmError> {
        let mut messages = self.user_messages.clone();
        if let Some(last) = messages.last_mut() {
            let block = self.task_envelope.to_block();
            if let Some(stripped) = last.strip_suffix(&block) {
                *last = stripped.trim_end().to_string();
            }
        }
        messages.push(message);
        PromptBundle::new(self.system.clone(), messages, envelope, self.temperature, self.max_tokens)
    }
}
