//! Rubric generation stage: iterative refinement of a rubric from small
//! human-labeled samples, drawn either uniformly or stratified by the
//! current LLM score distribution.

mod label;
mod sampling;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use label::{human_label, InteractiveLabeler, LabeledPair, Labeler, LookupLabeler};
pub use sampling::{
    allocate, sample_random, sample_strata, stratify, Allocation, SampleBatch, SamplingMethod, ScoreDistribution, Stratum,
};

use crate::corpus::{Corpus, Granularity, Question, Rubric, ScoredAnswer, Scorer};
use crate::grader::{self, GradeError, GradeFailure, GradingOptions, GradingStrategy, StrategyKind};
use crate::llm::{self, Backend, LlmError, PromptBundle, Task, TaskEnvelope};
use crate::prompt::{self, fmt_score, render, TemplateError};
use crate::seed::derive_seed;
use crate::store::RunWarning;

#[derive(Debug, thiserror::Error)]
pub enum RubricError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("no answers left to sample in iteration {iteration}")]
    PoolExhausted { iteration: u32 },
    #[error("no graded answers to stratify")]
    NoGradedAnswers,
    #[error("no human label for answer `{0}`")]
    MissingLabel(String),
    #[error("input closed while waiting for a label")]
    TerminalClosed,
    #[error("terminal i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grade(#[from] GradeError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("model returned an empty rubric")]
    EmptyRubric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub method: SamplingMethod,
    pub sample_size: usize,
    pub iterations: u32,
    pub strata_count: usize,
    pub seed: u64,
    pub exclude_used: bool,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            method: SamplingMethod::DistributionAware,
            sample_size: 5,
            iterations: 2,
            strata_count: 5,
            seed: 0,
            exclude_used: true,
            temperature: llm::DEFAULT_RUBRIC_TEMPERATURE,
            max_tokens: llm::DEFAULT_MAX_TOKENS,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self, pool_size: usize) -> Result<(), RubricError> {
        if self.sample_size == 0 || self.iterations == 0 {
            return Err(RubricError::Config("sample size and iterations must be positive".into()));
        }
        if self.sample_size >= pool_size {
            return Err(RubricError::Config(format!(
                "sample size {} must be smaller than the {pool_size} available answers",
                self.sample_size
            )));
        }
        if self.method == SamplingMethod::DistributionAware && self.strata_count < 2 {
            return Err(RubricError::Config("distribution-aware sampling needs at least 2 strata".into()));
        }
        Ok(())
    }

    pub fn granularity(&self) -> Granularity {
        match self.method {
            SamplingMethod::Random => Granularity::GeneratedRandom,
            SamplingMethod::DistributionAware => Granularity::GeneratedDistribution,
        }
    }
}

/// Baseline LLM grade of every answer under `rubric`. Failed answers are
/// returned separately and left out of the scores.
pub fn initial_grade_all(
    question: &Question,
    rubric: &Rubric,
    corpus: &Corpus,
    backend: &dyn Backend,
    options: &GradingOptions,
    pass_seed: u64,
) -> Result<(Vec<ScoredAnswer>, Vec<GradeFailure>), RubricError> {
    let answers = corpus.answers_for(&question.id);
    let g = grader::Grader::new(question, rubric, backend, options);
    let out = g.grade_pass(&answers, &GradingStrategy::of(StrategyKind::Baseline), None, 0, pass_seed)?;
    let scores = out
        .records
        .into_iter()
        .map(|r| ScoredAnswer { answer_id: r.answer_id, score: r.score, scorer: Scorer::Llm, rationale: Some(r.feedback) })
        .collect();
    Ok((scores, out.failures))
}

/// Result of one distribution-aware draw.
#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedDraw {
    pub batch: SampleBatch,
    pub distribution: ScoreDistribution,
    pub allocation: Allocation,
    pub failures: Vec<GradeFailure>,
}

/// Grades all answers under the current rubric, stratifies the still
/// unused ones and samples each stratum by its allocation.
#[allow(clippy::too_many_arguments)]
pub fn sample_distribution_aware(
    question: &Question,
    rubric: &Rubric,
    corpus: &Corpus,
    config: &GenerationConfig,
    backend: &dyn Backend,
    options: &GradingOptions,
    iteration: u32,
    used: &mut BTreeSet<String>,
) -> Result<StratifiedDraw, RubricError> {
    let pass_seed = derive_seed(config.seed, "initial-grade", &iteration.to_string());
    let (scores, failures) = initial_grade_all(question, rubric, corpus, backend, options, pass_seed)?;
    let available: Vec<ScoredAnswer> = scores.into_iter().filter(|s| !used.contains(&s.answer_id)).collect();
    if available.is_empty() {
        return Err(RubricError::PoolExhausted { iteration });
    }
    let distribution = stratify(&available, config.strata_count, question.full_points)?;
    let allocation = allocate(&distribution, config.sample_size)?;
    let batch = sample_strata(&distribution, &allocation, config.seed, iteration);
    used.extend(batch.answer_ids.iter().cloned());
    Ok(StratifiedDraw { batch, distribution, allocation, failures })
}

fn sample_section(pairs: &[LabeledPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!("### Answer {}\n{}\nScore: {}\n", p.answer_id, p.text.trim_end(), fmt_score(p.score)));
        if let Some(r) = &p.rationale {
            out.push_str(&format!("Reason: {r}\n"));
        }
        out.push('\n');
    }
    out
}

pub fn build_rubric_prompt(
    question: &Question,
    rubric: &Rubric,
    pairs: &[LabeledPair],
    config: &GenerationConfig,
) -> Result<PromptBundle, RubricError> {
    if pairs.is_empty() {
        return Err(RubricError::Config("rubric prompt needs at least one labeled answer".into()));
    }
    let full = fmt_score(question.full_points);
    let supp = grader::supplementary_section(question);
    let samples = sample_section(pairs);
    let mut slots = grader::question_slots(question, rubric, &full, &supp);
    slots.push(("sample_studata", &samples));
    let text = render(prompt::RUBRIC_PROMPT, &slots)?;
    let envelope = TaskEnvelope::new(
        Task::GenerateRubric,
        &question.id,
        rubric.version,
        pairs.iter().map(|p| p.answer_id.clone()).collect(),
    )
    .with_param("rubric", rubric.id())
    .with_param("rubric_body", rubric.body.as_str())
    .with_param("method", config.method.as_str());
    Ok(PromptBundle::new(prompt::RUBRIC_SYSTEM, vec![text], envelope, config.temperature, config.max_tokens)?)
}

/// `r_{i+1}` from `r_i` and the reply to the rubric prompt.
pub fn refine_rubric(
    question: &Question,
    rubric: &Rubric,
    pairs: &[LabeledPair],
    config: &GenerationConfig,
    backend: &dyn Backend,
) -> Result<Rubric, RubricError> {
    if rubric.question_id != question.id {
        return Err(RubricError::Config(format!("rubric {} does not belong to {}", rubric.id(), question.id)));
    }
    let bundle = build_rubric_prompt(question, rubric, pairs, config)?;
    let reply = llm::complete(&bundle, backend)?;
    let body = reply.text.trim();
    if body.is_empty() {
        return Err(RubricError::EmptyRubric);
    }
    Ok(rubric.successor(body, config.granularity()))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationOutcome {
    /// `r_0 .. r_t`.
    pub chain: Vec<Rubric>,
    pub batches: Vec<SampleBatch>,
    pub labels: Vec<LabeledPair>,
    pub failures: Vec<GradeFailure>,
    pub warnings: Vec<RunWarning>,
}

/// `t` rounds of sample, label and refine starting from `r0`. Pool
/// exhaustion ends the loop early with a warning.
pub fn run_generation(
    question: &Question,
    r0: &Rubric,
    corpus: &Corpus,
    config: &GenerationConfig,
    backend: &dyn Backend,
    options: &GradingOptions,
    labeler: &mut dyn Labeler,
) -> Result<GenerationOutcome, RubricError> {
    let pool: Vec<String> = corpus.answers_for(&question.id).iter().map(|a| a.id.clone()).collect();
    config.validate(pool.len())?;
    let mut out = GenerationOutcome { chain: vec![r0.clone()], ..Default::default() };
    let mut used = BTreeSet::new();
    for iteration in 1..=config.iterations {
        let current = out.chain.last().expect("chain starts with r0").clone();
        if !config.exclude_used {
            used.clear();
        }
        let drawn = match config.method {
            SamplingMethod::Random => sample_random(&pool, config.sample_size, config.seed, iteration, &mut used),
            SamplingMethod::DistributionAware => {
                sample_distribution_aware(question, &current, corpus, config, backend, options, iteration, &mut used).map(|d| {
                    out.failures.extend(d.failures);
                    d.batch
                })
            }
        };
        let batch = match drawn {
            Ok(b) => b,
            Err(RubricError::PoolExhausted { .. }) => {
                let msg = format!("answer pool exhausted before iteration {iteration} of {}", config.iterations);
                log::warn!("{msg}");
                out.warnings.push(RunWarning::new("rubric", msg));
                break;
            }
            Err(e) => return Err(e),
        };
        if batch.answer_ids.len() < config.sample_size {
            out.warnings.push(RunWarning::new(
                "rubric",
                format!("iteration {iteration} sampled {} of {} answers", batch.answer_ids.len(), config.sample_size),
            ));
        }
        let pairs = human_label(corpus, question, &current, &batch.answer_ids, iteration, labeler)?;
        let next = refine_rubric(question, &current, &pairs, config, backend)?;
        log::info!("rubric {} refined from {} labeled answers", next.id(), pairs.len());
        out.chain.push(next);
        out.batches.push(batch);
        out.labels.extend(pairs);
    }
    Ok(out)
}
