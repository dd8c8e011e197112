//! Grading stage: baseline, one-shot, self-reflection and batching prompt
//! strategies, reply extraction and repetition runs.

mod prompts;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use prompts::build_grading_prompt;
pub(crate) use prompts::{question_slots, supplementary_section};

use crate::corpus::{Answer, Corpus, Granularity, Question, Rubric};
use crate::llm::parse::{parse_scores, ParsedScore};
use crate::llm::{self, parallel_map, Backend, LlmError, ParseError, PromptBundle};
use crate::prompt::{self, fmt_score, render, TemplateError};
use crate::seed::derive_seed;
use crate::store::{Artifact, ArtifactKind};

#[derive(Debug, thiserror::Error)]
pub enum GradeError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("unusable reply: {0}")]
    Parse(#[from] ParseError),
    #[error("prompt of {chars} characters exceeds the context budget of {budget}; use a smaller batch")]
    ContextBudget { chars: usize, budget: usize },
    #[error("reply does not cover the requested answers: {0}")]
    Incomplete(String),
    #[error("invalid grading request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl GradeError {
    /// Errors that should stop a whole stage rather than fail one item.
    pub fn is_fatal(&self) -> bool {
        match self {
            GradeError::Llm(e) => !matches!(e, LlmError::ContextLength(_) | LlmError::Simulation(_)),
            GradeError::Invalid(_) | GradeError::Template(_) => true,
            _ => false,
        }
    }

    fn wants_reask(&self) -> bool {
        matches!(self, GradeError::Parse(e) if e.is_unparsable()) || matches!(self, GradeError::Incomplete(_))
    }

    fn is_context(&self) -> bool {
        matches!(self, GradeError::ContextBudget { .. } | GradeError::Llm(LlmError::ContextLength(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Baseline,
    OneShot,
    SelfReflection,
    Batching,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] =
        [StrategyKind::Baseline, StrategyKind::OneShot, StrategyKind::SelfReflection, StrategyKind::Batching];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Baseline => "baseline",
            StrategyKind::OneShot => "one_shot",
            StrategyKind::SelfReflection => "self_reflection",
            StrategyKind::Batching => "batching",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "one-shot" | "one_shot" | "oneshot" => Ok(Self::OneShot),
            "reflect" | "self-reflection" | "self_reflection" => Ok(Self::SelfReflection),
            "batch" | "batching" => Ok(Self::Batching),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleSelector {
    MedianScore,
    FirstLabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradingStrategy {
    pub kind: StrategyKind,
    pub reflection_rounds: u32,
    pub batch_size: usize,
    pub example_selector: ExampleSelector,
}

impl Default for GradingStrategy {
    fn default() -> Self {
        GradingStrategy {
            kind: StrategyKind::Baseline,
            reflection_rounds: 2,
            batch_size: 10,
            example_selector: ExampleSelector::MedianScore,
        }
    }
}

impl GradingStrategy {
    pub fn of(kind: StrategyKind) -> Self {
        GradingStrategy { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), GradeError> {
        if self.kind == StrategyKind::Batching && self.batch_size < 2 {
            return Err(GradeError::Invalid(format!("batch size {} must be at least 2", self.batch_size)));
        }
        if self.kind == StrategyKind::SelfReflection && self.reflection_rounds < 1 {
            return Err(GradeError::Invalid("self-reflection needs at least one round".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradingOptions {
    /// Character-count proxy for the model's context window.
    pub context_budget_chars: usize,
    pub parallelism: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GradingOptions {
    fn default() -> Self {
        GradingOptions {
            context_budget_chars: 48_000,
            parallelism: llm::DEFAULT_PARALLELISM,
            temperature: llm::DEFAULT_GRADING_TEMPERATURE,
            max_tokens: llm::DEFAULT_MAX_TOKENS,
        }
    }
}

/// A human-graded answer shown to the model in one-shot prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub answer_id: String,
    pub text: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

/// Median selection takes the lower median score and, among answers with
/// that score, the smallest id.
pub fn select_example(pool: &[Example], selector: ExampleSelector) -> Option<&Example> {
    match selector {
        ExampleSelector::FirstLabeled => pool.first(),
        ExampleSelector::MedianScore => {
            if pool.is_empty() {
                return None;
            }
            let mut sorted: Vec<&Example> = pool.iter().collect();
            sorted.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.answer_id.cmp(&b.answer_id)));
            let median = sorted[(sorted.len() - 1) / 2].score;
            sorted.into_iter().find(|e| e.score == median)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub question_id: String,
    pub answer_id: String,
    pub score: f64,
    pub feedback: String,
    pub strategy: StrategyKind,
    pub rubric_version: u32,
    pub rubric_granularity: Granularity,
    pub repetition: u32,
    pub model: String,
    /// First-pass score for self-reflection; the trace holds one score per
    /// reflection round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection_trace: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub regrade: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Artifact for GradeRecord {
    const KIND: ArtifactKind = ArtifactKind::Grades;
}

/// An answer that could not be graded, kept in the run store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeFailure {
    pub question_id: String,
    pub answer_id: String,
    pub strategy: StrategyKind,
    pub rubric_version: u32,
    pub repetition: u32,
    pub error: String,
}

impl Artifact for GradeFailure {
    const KIND: ArtifactKind = ArtifactKind::Failures;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradingOutcome {
    pub records: Vec<GradeRecord>,
    pub failures: Vec<GradeFailure>,
}

impl GradingOutcome {
    fn extend(&mut self, other: GradingOutcome) {
        self.records.extend(other.records);
        self.failures.extend(other.failures);
    }

    fn sort(&mut self) {
        self.records.sort_by(|a, b| (a.repetition, &a.answer_id).cmp(&(b.repetition, &b.answer_id)));
        self.failures.sort_by(|a, b| (a.repetition, &a.answer_id).cmp(&(b.repetition, &b.answer_id)));
    }
}

/// Grades answers of one question against one rubric.
pub struct Grader<'a> {
    pub question: &'a Question,
    pub rubric: &'a Rubric,
    pub backend: &'a dyn Backend,
    pub options: &'a GradingOptions,
}

struct Graded {
    score: ParsedScore,
    model: String,
}

impl<'a> Grader<'a> {
    pub fn new(question: &'a Question, rubric: &'a Rubric, backend: &'a dyn Backend, options: &'a GradingOptions) -> Self {
        Grader { question, rubric, backend, options }
    }

    fn record(&self, answer_id: &str, graded: Graded, kind: StrategyKind, repetition: u32) -> GradeRecord {
        GradeRecord {
            question_id: self.question.id.clone(),
            answer_id: answer_id.to_string(),
            score: graded.score.score,
            feedback: graded.score.feedback,
            strategy: kind,
            rubric_version: self.rubric.version,
            rubric_granularity: self.rubric.granularity,
            repetition,
            model: graded.model,
            initial_score: None,
            reflection_trace: None,
            regrade: false,
            warnings: Vec::new(),
        }
    }

    pub fn failure(&self, answer_id: &str, kind: StrategyKind, repetition: u32, error: &GradeError) -> GradeFailure {
        GradeFailure {
            question_id: self.question.id.clone(),
            answer_id: answer_id.to_string(),
            strategy: kind,
            rubric_version: self.rubric.version,
            repetition,
            error: error.to_string(),
        }
    }

    /// Sends `bundle`, parses the reply with `parse`, and re-asks once when
    /// the reply is unusable.
    fn ask<T>(
        &self,
        bundle: &PromptBundle,
        parse: impl Fn(&str) -> Result<T, GradeError>,
    ) -> Result<(T, String), GradeError> {
        let response = llm::complete(bundle, self.backend)?;
        match parse(&response.text) {
            Ok(v) => Ok((v, response.model)),
            Err(e) if e.wants_reask() => {
                log::debug!("re-asking after unusable reply: {e}");
                let envelope = bundle.task_envelope.clone().with_param("attempt", 1u64);
                let retry = bundle.follow_up(prompt::REASK_TURN.to_string(), envelope)?;
                let response = llm::complete(&retry, self.backend)?;
                Ok((parse(&response.text)?, response.model))
            }
            Err(e) => Err(e),
        }
    }

    fn single_score(&self, answer_id: &str, text: &str) -> Result<ParsedScore, GradeError> {
        let scores = parse_scores(text, self.question.full_points)?;
        if let Some(s) = scores.iter().find(|s| s.answer_id == answer_id) {
            return Ok(s.clone());
        }
        match scores.as_slice() {
            [only] => Ok(ParsedScore { answer_id: answer_id.to_string(), ..only.clone() }),
            _ => Err(GradeError::Incomplete(format!("no score for `{answer_id}`"))),
        }
    }

    /// One request for one answer (baseline or one-shot).
    pub fn grade_once(
        &self,
        answer: &Answer,
        kind: StrategyKind,
        example: Option<&Example>,
        repetition: u32,
        pass_seed: u64,
    ) -> Result<GradeRecord, GradeError> {
        if !matches!(kind, StrategyKind::Baseline | StrategyKind::OneShot) {
            return Err(GradeError::Invalid(format!("grade_once does not handle {}", kind.as_str())));
        }
        let bundle = build_grading_prompt(kind, self.question, self.rubric, &[answer], example, self.options, pass_seed)?;
        let (score, model) = self.ask(&bundle, |t| self.single_score(&answer.id, t))?;
        Ok(self.record(&answer.id, Graded { score, model }, kind, repetition))
    }

    /// Initial grade followed by `rounds` reflection turns. A failed turn
    /// keeps the last good score and is noted in the record's warnings.
    pub fn grade_reflect(&self, answer: &Answer, rounds: u32, repetition: u32, pass_seed: u64) -> Result<GradeRecord, GradeError> {
        if rounds < 1 {
            return Err(GradeError::Invalid("self-reflection needs at least one round".into()));
        }
        let kind = StrategyKind::SelfReflection;
        let bundle = build_grading_prompt(kind, self.question, self.rubric, &[answer], None, self.options, pass_seed)?;
        let (initial, model) = self.ask(&bundle, |t| self.single_score(&answer.id, t))?;

        let mut current = initial.clone();
        let mut model = model;
        let mut trace = Vec::with_capacity(rounds as usize);
        let mut warnings = Vec::new();
        let mut conversation = bundle;
        for round in 1..=rounds {
            let message = render(
                prompt::REFLECTION_TURN,
                &[("answer_id", &answer.id), ("score", &fmt_score(current.score)), ("feedback", &current.feedback)],
            )?;
            let envelope = conversation.task_envelope.clone().with_param("round", round as u64);
            let turn = conversation.follow_up(message, envelope)?;
            match self.ask(&turn, |t| self.single_score(&answer.id, t)) {
                Ok((next, m)) => {
                    current = next;
                    model = m;
                }
                Err(e) if e.is_fatal() => return Err(e),
                Err(e) => warnings.push(format!("reflection round {round} failed, kept previous score: {e}")),
            }
            trace.push(current.score);
            conversation = turn;
        }
        let mut record = self.record(&answer.id, Graded { score: current, model }, kind, repetition);
        record.initial_score = Some(initial.score);
        record.reflection_trace = Some(trace);
        record.warnings = warnings;
        Ok(record)
    }

    /// Scores keyed by id when the reply covers `ids` exactly once each.
    fn batch_scores(&self, ids: &[&str], text: &str) -> Result<Vec<ParsedScore>, GradeError> {
        let scores = parse_scores(text, self.question.full_points)?;
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &scores {
            *counts.entry(s.answer_id.as_str()).or_default() += 1;
        }
        let missing: Vec<&str> = ids.iter().copied().filter(|id| !counts.contains_key(id)).collect();
        let dupes: Vec<&str> = counts.iter().filter(|(_, c)| **c > 1).map(|(id, _)| *id).collect();
        let extra: Vec<&str> = counts.keys().copied().filter(|id| !ids.contains(id)).collect();
        if missing.is_empty() && dupes.is_empty() && extra.is_empty() {
            Ok(scores)
        } else {
            Err(GradeError::Incomplete(format!("missing {missing:?}, duplicated {dupes:?}, unexpected {extra:?}")))
        }
    }

    fn grade_chunk(&self, chunk: &[&Answer], repetition: u32, pass_seed: u64, may_split: bool) -> Result<GradingOutcome, GradeError> {
        let kind = StrategyKind::Batching;
        let ids: Vec<&str> = chunk.iter().map(|a| a.id.as_str()).collect();
        let attempt = build_grading_prompt(kind, self.question, self.rubric, chunk, None, self.options, pass_seed)
            .and_then(|bundle| {
                let response = llm::complete(&bundle, self.backend)?;
                Ok((bundle, response))
            });
        let (bundle, response) = match attempt {
            Ok(v) => v,
            Err(e) if e.is_context() && may_split && chunk.len() > 1 => {
                log::info!("halving batch of {} after context overflow", chunk.len());
                let (left, right) = chunk.split_at(chunk.len().div_ceil(2));
                let mut out = self.grade_chunk(left, repetition, pass_seed, false)?;
                out.extend(self.grade_chunk(right, repetition, pass_seed, false)?);
                return Ok(out);
            }
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                let failures = ids.iter().map(|id| self.failure(id, kind, repetition, &e)).collect();
                return Ok(GradingOutcome { records: Vec::new(), failures });
            }
        };

        let first = self.batch_scores(&ids, &response.text);
        let (text, model, error) = match first {
            Ok(scores) => return Ok(self.batch_outcome(chunk, scores, response.model, repetition)),
            Err(e) if e.wants_reask() => {
                let envelope = bundle.task_envelope.clone().with_param("attempt", 1u64);
                let retry = bundle.follow_up(prompt::REASK_TURN.to_string(), envelope)?;
                match llm::complete(&retry, self.backend) {
                    Ok(r) => match self.batch_scores(&ids, &r.text) {
                        Ok(scores) => return Ok(self.batch_outcome(chunk, scores, r.model, repetition)),
                        Err(e) => (r.text, r.model, e),
                    },
                    Err(e) => {
                        let e = GradeError::from(e);
                        if e.is_fatal() {
                            return Err(e);
                        }
                        (String::new(), String::new(), e)
                    }
                }
            }
            Err(e) => (response.text, response.model, e),
        };

        // Salvage every answer that the last reply scored exactly once.
        let salvaged = parse_scores(&text, self.question.full_points).unwrap_or_default();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &salvaged {
            *counts.entry(s.answer_id.as_str()).or_default() += 1;
        }
        let mut out = GradingOutcome::default();
        for a in chunk {
            match salvaged.iter().find(|s| s.answer_id == a.id) {
                Some(s) if counts[a.id.as_str()] == 1 => out.records.push(self.record(
                    &a.id,
                    Graded { score: s.clone(), model: model.clone() },
                    kind,
                    repetition,
                )),
                _ => out.failures.push(self.failure(&a.id, kind, repetition, &error)),
            }
        }
        Ok(out)
    }

    fn batch_outcome(&self, chunk: &[&Answer], scores: Vec<ParsedScore>, model: String, repetition: u32) -> GradingOutcome {
        let mut records = Vec::with_capacity(chunk.len());
        for a in chunk {
            let s = scores.iter().find(|s| s.answer_id == a.id).expect("completeness checked").clone();
            records.push(self.record(&a.id, Graded { score: s, model: model.clone() }, StrategyKind::Batching, repetition));
        }
        GradingOutcome { records, failures: Vec::new() }
    }

    /// Chunks `answers` (ascending id) into batches of `batch_size` and
    /// grades each batch with one request.
    pub fn grade_batch(&self, answers: &[&Answer], batch_size: usize, repetition: u32, pass_seed: u64) -> Result<GradingOutcome, GradeError> {
        if batch_size < 2 {
            return Err(GradeError::Invalid(format!("batch size {batch_size} must be at least 2")));
        }
        let mut sorted: Vec<&Answer> = answers.to_vec();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let chunks: Vec<&[&Answer]> = sorted.chunks(batch_size).collect();
        let results = parallel_map(&chunks, self.options.parallelism, |chunk| self.grade_chunk(chunk, repetition, pass_seed, true));
        let mut out = GradingOutcome::default();
        for r in results {
            out.extend(r?);
        }
        out.sort();
        Ok(out)
    }

    /// One full pass over `answers` with `strategy`.
    pub fn grade_pass(
        &self,
        answers: &[&Answer],
        strategy: &GradingStrategy,
        example: Option<&Example>,
        repetition: u32,
        pass_seed: u64,
    ) -> Result<GradingOutcome, GradeError> {
        strategy.validate()?;
        if strategy.kind == StrategyKind::Batching {
            return self.grade_batch(answers, strategy.batch_size, repetition, pass_seed);
        }
        if strategy.kind == StrategyKind::OneShot && example.is_none() {
            return Err(GradeError::Invalid("one-shot grading needs a labeled example".into()));
        }
        let mut sorted: Vec<&Answer> = answers.to_vec();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let results = parallel_map(&sorted, self.options.parallelism, |a| match strategy.kind {
            StrategyKind::SelfReflection => self.grade_reflect(a, strategy.reflection_rounds, repetition, pass_seed),
            kind => self.grade_once(a, kind, example, repetition, pass_seed),
        });
        let mut out = GradingOutcome::default();
        for (a, r) in sorted.iter().zip(results) {
            match r {
                Ok(rec) => out.records.push(rec),
                Err(e) if e.is_fatal() => return Err(e),
                Err(e) => out.failures.push(self.failure(&a.id, strategy.kind, repetition, &e)),
            }
        }
        Ok(out)
    }
}

/// Seed placed in the envelope of every request of repetition `r`.
pub fn pass_seed(seed: u64, repetition: u32) -> u64 {
    derive_seed(seed, "grade-pass", &repetition.to_string())
}

/// `repetitions` full passes over every answer of `question`.
#[allow(clippy::too_many_arguments)]
pub fn run_grading(
    corpus: &Corpus,
    question: &Question,
    rubric: &Rubric,
    strategy: &GradingStrategy,
    repetitions: u32,
    backend: &dyn Backend,
    seed: u64,
    options: &GradingOptions,
    examples: &[Example],
) -> Result<GradingOutcome, GradeError> {
    if repetitions < 1 {
        return Err(GradeError::Invalid("at least one repetition is required".into()));
    }
    if rubric.question_id != question.id {
        return Err(GradeError::Invalid(format!("rubric {} does not belong to {}", rubric.id(), question.id)));
    }
    let example = match strategy.kind {
        StrategyKind::OneShot => Some(
            select_example(examples, strategy.example_selector)
                .ok_or_else(|| GradeError::Invalid("one-shot grading needs a labeled example".into()))?,
        ),
        _ => None,
    };
    let answers = corpus.answers_for(&question.id);
    let grader = Grader::new(question, rubric, backend, options);
    let mut out = GradingOutcome::default();
    for r in 0..repetitions {
        out.extend(grader.grade_pass(&answers, strategy, example, r, pass_seed(seed, r))?);
    }
    out.sort();
    Ok(out)
}
