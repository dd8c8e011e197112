use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Backend, LlmError, LlmResponse, PromptBundle, Usage};

/// Wildcard digest: the entry answers any envelope that has no entry of
/// its own, in file order.
pub const ANY_DIGEST: &str = "*";

/// One line of a scripted-reply fixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub envelope_digest: String,
    pub reply_text: String,
}

impl ScriptEntry {
    pub fn any(reply: impl Into<String>) -> Self {
        ScriptEntry { envelope_digest: ANY_DIGEST.into(), reply_text: reply.into() }
    }
}

/// Replays canned replies keyed by envelope digest. Replies for the same
/// digest are consumed in fixture order.
#[derive(Debug)]
pub struct ScriptedBackend {
    by_digest: Mutex<HashMap<String, VecDeque<String>>>,
    wildcard: Mutex<VecDeque<String>>,
    model: String,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut by_digest: HashMap<String, VecDeque<String>> = HashMap::new();
        let mut wildcard = VecDeque::new();
        for e in entries {
            if e.envelope_digest == ANY_DIGEST {
                wildcard.push_back(e.reply_text);
            } else {
                by_digest.entry(e.envelope_digest).or_default().push_back(e.reply_text);
            }
        }
        ScriptedBackend { by_digest: Mutex::new(by_digest), wildcard: Mutex::new(wildcard), model: "scripted".into() }
    }

    /// Replies handed out in order to whatever asks.
    pub fn queued<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(replies.into_iter().map(ScriptEntry::any))
    }

    pub fn with_model(mut self, model: &str) -> Self {
        self.model = model.to_string();
        self
    }

    pub fn from_fixture(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("cannot read fixture {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| LlmError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn remaining(&self) -> usize {
        self.by_digest.lock().unwrap().values().map(VecDeque::len).sum::<usize>() + self.wildcard.lock().unwrap().len()
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        let start = Instant::now();
        let digest = bundle.task_envelope.digest();
        let from_digest = self.by_digest.lock().unwrap().get_mut(&digest).and_then(VecDeque::pop_front);
        let text = match from_digest {
            Some(t) => t,
            None => self.wildcard.lock().unwrap().pop_front().ok_or_else(|| {
                LlmError::Script(format!(
                    "no reply left for {:?} envelope {digest}",
                    bundle.task_envelope.task
                ))
            })?,
        };
        Ok(LlmResponse { text, model: self.model.clone(), usage: Usage::default(), latency: start.elapsed() })
    }

    fn model(&self) -> &str {
        &self.model
    }
}

/// Wraps a backend and records every successful exchange as a fixture
/// entry, so a run can later be replayed with [`ScriptedBackend`].
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<ScriptEntry>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend { inner, log: Mutex::new(Vec::new()) }
    }

    /// Recorded entries, grouped by digest with per-digest order kept.
    pub fn entries(&self) -> Vec<ScriptEntry> {
        let mut entries = self.log.lock().unwrap().clone();
        entries.sort_by(|a, b| a.envelope_digest.cmp(&b.envelope_digest));
        entries
    }

    pub fn write_fixture(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut out = String::new();
        for e in self.entries() {
            out.push_str(&serde_json::to_string(&e).expect("serializable"));
            out.push('\n');
        }
        fs::write(path, out)
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        let response = self.inner.complete(bundle)?;
        self.log.lock().unwrap().push(ScriptEntry {
            envelope_digest: bundle.task_envelope.digest(),
            reply_text: response.text.clone(),
        });
        Ok(response)
    }

    fn model(&self) -> &str {
        self.inner.model()
    }

    fn network_attempts(&self) -> u64 {
        self.inner.network_attempts()
    }
}
