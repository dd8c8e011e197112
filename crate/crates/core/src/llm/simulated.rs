//! Seeded noisy-oracle stand-in for a grading model.
//!
//! Grade replies are `clamp(round_half_up(final + N(0, sigma)), 0, full)`.
//! Review replies flag every listed pair whose score is further than
//! `max(2 sigma, full / 4)` from the oracle. Rubric replies echo the prior
//! body with a revision marker. All draws are keyed by
//! `(seed, envelope seed param, answer id)`, so replies never depend on
//! call order or batch composition.

use std::collections::HashMap;
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde_json::Value;

use super::parse::{render_flags, render_scores, FlagReason, ParsedFlag, ParsedScore};
use super::{Backend, LlmError, LlmResponse, PromptBundle, Task, TaskEnvelope, Usage};
use crate::corpus::Corpus;
use crate::seed::rng_for;

/// Ground truth the simulated grader scatters around.
#[derive(Debug, Clone, Default)]
pub struct Oracle {
    scores: HashMap<String, (f64, f64)>,
}

impl Oracle {
    /// `human_final` and full points for every labeled answer.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut scores = HashMap::new();
        for a in &corpus.answers {
            if let (Some(final_score), Some(full)) = (corpus.human_final(&a.id), corpus.full_points_for_answer(&a.id)) {
                scores.insert(a.id.clone(), (final_score, full));
            }
        }
        Oracle { scores }
    }

    pub fn insert(&mut self, answer_id: &str, final_score: f64, full_points: f64) {
        self.scores.insert(answer_id.to_string(), (final_score, full_points));
    }

    pub fn get(&self, answer_id: &str) -> Option<(f64, f64)> {
        self.scores.get(answer_id).copied()
    }
}

pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

pub fn revision_marker(version: u32) -> String {
    format!("[revision v{version}]")
}

fn noisy_score(oracle: (f64, f64), seed: u64, pass_seed: u64, answer_id: &str, sigma: f64) -> f64 {
    let (truth, full) = oracle;
    let noise = if sigma > 0.0 {
        let mut rng = rng_for(seed, &format!("simulated-grade/{pass_seed}"), answer_id);
        Normal::new(0.0, sigma).expect("sigma validated").sample(&mut rng)
    } else {
        0.0
    };
    round_half_up(truth + noise).clamp(0.0, full)
}

fn lookup(oracle: &Oracle, id: &str) -> Result<(f64, f64), LlmError> {
    oracle.get(id).ok_or_else(|| LlmError::Simulation(format!("no oracle score for answer `{id}`")))
}

/// The reply text the simulated backend produces for an envelope.
pub fn simulated_reply(envelope: &TaskEnvelope, oracle: &Oracle, seed: u64, sigma: f64) -> Result<String, LlmError> {
    let pass_seed = envelope.param_u64("seed").unwrap_or(0);
    match envelope.task {
        Task::Grade => {
            let mut scores = Vec::with_capacity(envelope.answer_ids.len());
            for id in &envelope.answer_ids {
                let truth = lookup(oracle, id)?;
                scores.push(ParsedScore {
                    answer_id: id.clone(),
                    score: noisy_score(truth, seed, pass_seed, id, sigma),
                    feedback: "Simulated assessment.".into(),
                });
            }
            Ok(render_scores(&scores))
        }
        Task::Review => {
            let listed = envelope
                .params
                .get("scores")
                .and_then(Value::as_object)
                .ok_or_else(|| LlmError::Simulation("review envelope lacks `scores`".into()))?;
            let mut flags = Vec::new();
            for id in &envelope.answer_ids {
                let (truth, full) = lookup(oracle, id)?;
                let score = listed
                    .get(id)
                    .and_then(Value::as_f64)
                    .ok_or_else(|| LlmError::Simulation(format!("review envelope lacks a score for `{id}`")))?;
                let deviation = (score - truth).abs();
                let threshold = (2.0 * sigma).max(0.25 * full);
                if deviation > threshold {
                    flags.push(ParsedFlag {
                        answer_id: id.clone(),
                        reason: FlagReason::RubricDeviation,
                        detail: format!("score {score} deviates by {deviation:.2} points"),
                    });
                }
            }
            Ok(render_flags(&flags))
        }
        Task::GenerateRubric => {
            let body = envelope
                .param_str("rubric_body")
                .ok_or_else(|| LlmError::Simulation("rubric envelope lacks `rubric_body`".into()))?;
            Ok(format!("{}\n{}", body.trim_end(), revision_marker(envelope.rubric_version + 1)))
        }
    }
}

pub struct SimulatedBackend {
    oracle: Oracle,
    seed: u64,
    sigma: f64,
    model: String,
}

impl SimulatedBackend {
    pub fn new(oracle: Oracle, seed: u64, sigma: f64) -> Self {
        SimulatedBackend { oracle, seed, sigma, model: format!("simulated(sigma={sigma})") }
    }
}

impl Backend for SimulatedBackend {
    fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        let start = Instant::now();
        let text = simulated_reply(&bundle.task_envelope, &self.oracle, self.seed, self.sigma)?;
        Ok(LlmResponse { text, model: self.model.clone(), usage: Usage::default(), latency: start.elapsed() })
    }

    fn model(&self) -> &str {
        &self.model
    }
}
