//! Post-grading review: answers are split into groups, each group is shown
//! to the model with its scores, and flagged pairs go to a regrade queue.
//! An optional second round reviews recombined groups.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{Corpus, InjectionRecord, Question, Rubric, ScoredAnswer};
use crate::grader;
use crate::llm::parse::parse_flags;
use crate::llm::{self, parallel_map, Backend, FlagReason, LlmError, ParseError, PromptBundle, Task, TaskEnvelope};
use crate::prompt::{self, fmt_score, render, TemplateError};
use crate::seed::rng_for;
use crate::store::{Artifact, ArtifactKind, RunWarning};

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("invalid review config: {0}")]
    Config(String),
    #[error("review needs at least two scored answers, got {0}")]
    TooFew(usize),
    #[error("group {group} has {size} members, fewer than the {k} sub-groups requested")]
    GroupTooSmall { group: u32, size: usize, k: usize },
    #[error("answer `{0}` is not in the corpus")]
    UnknownAnswer(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounds {
    Single,
    Regrouped,
}

impl std::str::FromStr for Rounds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Rounds::Single),
            "regrouped" => Ok(Rounds::Regrouped),
            other => Err(format!("unknown review rounds `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Union,
    Intersection,
}

impl std::str::FromStr for Combine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "union" => Ok(Combine::Union),
            "intersection" => Ok(Combine::Intersection),
            other => Err(format!("unknown combine mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviewConfig {
    pub group_size: usize,
    pub subgroup_count: usize,
    pub rounds: Rounds,
    pub combine: Combine,
    pub seed: u64,
    pub parallelism: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        ReviewConfig {
            group_size: 10,
            subgroup_count: 2,
            rounds: Rounds::Regrouped,
            combine: Combine::Union,
            seed: 0,
            parallelism: llm::DEFAULT_PARALLELISM,
            temperature: llm::DEFAULT_GRADING_TEMPERATURE,
            max_tokens: llm::DEFAULT_MAX_TOKENS,
        }
    }
}

impl ReviewConfig {
    pub fn validate(&self) -> Result<(), ReviewError> {
        if self.group_size < 2 {
            return Err(ReviewError::Config(format!("group size {} must be at least 2", self.group_size)));
        }
        if self.subgroup_count < 2 || self.subgroup_count > self.group_size {
            return Err(ReviewError::Config(format!(
                "sub-group count {} must lie in [2, {}]",
                self.subgroup_count, self.group_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Round {
    Initial,
    Regrouped,
}

impl Round {
    pub fn as_str(self) -> &'static str {
        match self {
            Round::Initial => "initial",
            Round::Regrouped => "regrouped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewGroup {
    pub group_id: u32,
    pub round: Round,
    pub members: Vec<ScoredAnswer>,
}

impl ReviewGroup {
    pub fn contains(&self, answer_id: &str) -> bool {
        self.members.iter().any(|m| m.answer_id == answer_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewFinding {
    pub question_id: String,
    pub answer_id: String,
    pub reason: FlagReason,
    pub detail: String,
    pub round: Round,
    pub group_id: u32,
}

impl Artifact for ReviewFinding {
    const KIND: ArtifactKind = ArtifactKind::Reviews;
}

/// One answer queued for re-grading.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub question_id: String,
    pub answer_id: String,
}

impl Artifact for QueueEntry {
    const KIND: ArtifactKind = ArtifactKind::Queue;
}

/// Seeded shuffle, then chunks of `c`. A trailing single answer joins the
/// last group; a longer remainder forms its own group.
pub fn partition_groups(pairs: &[ScoredAnswer], c: usize, seed: u64) -> Result<Vec<ReviewGroup>, ReviewError> {
    if c < 2 {
        return Err(ReviewError::Config(format!("group size {c} must be at least 2")));
    }
    if pairs.len() < 2 {
        return Err(ReviewError::TooFew(pairs.len()));
    }
    let mut shuffled = pairs.to_vec();
    shuffled.sort_by(|a, b| a.answer_id.cmp(&b.answer_id));
    shuffled.shuffle(&mut rng_for(seed, "review-partition", ""));
    let mut chunks: Vec<Vec<ScoredAnswer>> = shuffled.chunks(c).map(<[ScoredAnswer]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|l| l.len() == 1) {
        let single = chunks.pop().expect("non-empty");
        chunks.last_mut().expect("at least one group").extend(single);
    }
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(i, members)| ReviewGroup { group_id: i as u32, round: Round::Initial, members })
        .collect())
}

fn split_contiguous<T: Clone>(items: &[T], k: usize) -> Vec<Vec<T>> {
    let (base, extra) = (items.len() / k, items.len() % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for j in 0..k {
        let len = base + usize::from(j < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Splits each group into `k` contiguous sub-groups, then builds new
/// group `i` from sub-group `j` of parent `(i + j) mod G`, with parents
/// taken in a seeded order. Every sub-group is used exactly once.
pub fn regroup(groups: &[ReviewGroup], k: usize, seed: u64) -> Result<Vec<ReviewGroup>, ReviewError> {
    if k < 2 {
        return Err(ReviewError::Config(format!("sub-group count {k} must be at least 2")));
    }
    if let Some(g) = groups.iter().find(|g| g.members.len() < k) {
        return Err(ReviewError::GroupTooSmall { group: g.group_id, size: g.members.len(), k });
    }
    let n = groups.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "review-regroup", ""));
    let subs: Vec<Vec<Vec<ScoredAnswer>>> = groups.iter().map(|g| split_contiguous(&g.members, k)).collect();

    let mut built: Vec<(usize, Vec<ScoredAnswer>)> = (0..n)
        .map(|i| {
            let mut members = Vec::new();
            for j in 0..k {
                members.extend(subs[order[(i + j) % n]][j].iter().cloned());
            }
            (order[i], members)
        })
        .collect();
    built.sort_by_key(|(anchor, _)| *anchor);
    Ok(built
        .into_iter()
        .enumerate()
        .map(|(i, (_, members))| ReviewGroup { group_id: i as u32, round: Round::Regrouped, members })
        .collect())
}

/// Review prompt for one group. Scores are listed in member order.
pub fn build_review_prompt(
    question: &Question,
    rubric: &Rubric,
    corpus: &Corpus,
    group: &ReviewGroup,
    config: &ReviewConfig,
) -> Result<PromptBundle, ReviewError> {
    let full = fmt_score(question.full_points);
    let supp = grader::supplementary_section(question);
    let mut pairs = String::new();
    let mut scores = Map::new();
    for m in &group.members {
        let answer = corpus.answer(&m.answer_id).ok_or_else(|| ReviewError::UnknownAnswer(m.answer_id.clone()))?;
        pairs.push_str(&format!("### Answer {}\n{}\nScore: {}\n\n", m.answer_id, answer.text.trim_end(), fmt_score(m.score)));
        scores.insert(m.answer_id.clone(), Value::from(m.score));
    }
    let mut slots = grader::question_slots(question, rubric, &full, &supp);
    slots.push(("pairs", &pairs));
    let text = render(prompt::REVIEW_PROMPT, &slots)?;
    let envelope = TaskEnvelope::new(
        Task::Review,
        &question.id,
        rubric.version,
        group.members.iter().map(|m| m.answer_id.clone()).collect(),
    )
    .with_param("rubric", rubric.id())
    .with_param("round", group.round.as_str())
    .with_param("group_id", group.group_id)
    .with_param("scores", Value::Object(scores));
    Ok(PromptBundle::new(prompt::REVIEW_SYSTEM, vec![text], envelope, config.temperature, config.max_tokens)?)
}

/// Outcome of reviewing a single group.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupReview {
    Reviewed { findings: Vec<ReviewFinding>, warnings: Vec<String> },
    Unreviewed { reason: String },
}

/// Sends the group to the model, re-asking once on an unusable reply.
pub fn review_group(
    question: &Question,
    rubric: &Rubric,
    corpus: &Corpus,
    group: &ReviewGroup,
    config: &ReviewConfig,
    backend: &dyn Backend,
) -> Result<GroupReview, ReviewError> {
    let bundle = build_review_prompt(question, rubric, corpus, group, config)?;
    let reply = match llm::complete(&bundle, backend) {
        Ok(r) => r,
        Err(e @ (LlmError::ContextLength(_) | LlmError::Simulation(_))) => {
            return Ok(GroupReview::Unreviewed { reason: e.to_string() })
        }
        Err(e) => return Err(e.into()),
    };
    let flags = match parse_flags(&reply.text) {
        Ok(f) => f,
        Err(_) => {
            let envelope = bundle.task_envelope.clone().with_param("attempt", 1u64);
            let retry = bundle.follow_up(prompt::REASK_TURN.to_string(), envelope)?;
            let second = llm::complete(&retry, backend)?;
            match parse_flags(&second.text) {
                Ok(f) => f,
                Err(e @ (ParseError::NoBlock | ParseError::SchemaMismatch(_) | ParseError::OutOfRange { .. })) => {
                    return Ok(GroupReview::Unreviewed { reason: e.to_string() })
                }
            }
        }
    };
    let mut seen = BTreeSet::new();
    let mut findings = Vec::new();
    let mut warnings = Vec::new();
    for f in flags {
        if !group.contains(&f.answer_id) {
            warnings.push(format!(
                "{} group {} flagged `{}`, which is not a member; ignored",
                group.round.as_str(),
                group.group_id,
                f.answer_id
            ));
            continue;
        }
        if seen.insert(f.answer_id.clone()) {
            findings.push(ReviewFinding {
                question_id: question.id.clone(),
                answer_id: f.answer_id,
                reason: f.reason,
                detail: f.detail,
                round: group.round,
                group_id: group.group_id,
            });
        }
    }
    findings.sort_by(|a, b| a.answer_id.cmp(&b.answer_id));
    Ok(GroupReview::Reviewed { findings, warnings })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReviewOutcome {
    pub groups: Vec<ReviewGroup>,
    /// Findings whose answer survives the combine rule, in
    /// `(round, group_id, answer_id)` order.
    pub findings: Vec<ReviewFinding>,
    pub queue: Vec<String>,
    pub unreviewed: Vec<(Round, u32, String)>,
    pub warnings: Vec<RunWarning>,
}

impl ReviewOutcome {
    pub fn queue_entries(&self, question_id: &str) -> Vec<QueueEntry> {
        self.queue
            .iter()
            .map(|id| QueueEntry { question_id: question_id.to_string(), answer_id: id.clone() })
            .collect()
    }
}

fn review_round(
    question: &Question,
    rubric: &Rubric,
    corpus: &Corpus,
    groups: &[ReviewGroup],
    config: &ReviewConfig,
    backend: &dyn Backend,
    out: &mut ReviewOutcome,
) -> Result<Vec<ReviewFinding>, ReviewError> {
    let results = parallel_map(groups, config.parallelism, |g| review_group(question, rubric, corpus, g, config, backend));
    let mut findings = Vec::new();
    for (g, r) in groups.iter().zip(results) {
        match r? {
            GroupReview::Reviewed { findings: f, warnings } => {
                findings.extend(f);
                out.warnings.extend(warnings.into_iter().map(|w| RunWarning::new("review", w)));
            }
            GroupReview::Unreviewed { reason } => {
                log::warn!("{} group {} left unreviewed: {reason}", g.round.as_str(), g.group_id);
                out.warnings.push(RunWarning::new(
                    "review",
                    format!("{} group {} unreviewed: {reason}", g.round.as_str(), g.group_id),
                ));
                out.unreviewed.push((g.round, g.group_id, reason));
            }
        }
    }
    Ok(findings)
}

/// Reviews `pairs` (the grades under review) and builds the regrade queue.
pub fn run_review(
    question: &Question,
    rubric: &Rubric,
    corpus: &Corpus,
    pairs: &[ScoredAnswer],
    config: &ReviewConfig,
    backend: &dyn Backend,
) -> Result<ReviewOutcome, ReviewError> {
    config.validate()?;
    let mut out = ReviewOutcome::default();
    let initial = partition_groups(pairs, config.group_size, config.seed)?;
    let mut findings = review_round(question, rubric, corpus, &initial, config, backend, &mut out)?;
    out.groups.extend(initial.iter().cloned());

    let combined: BTreeSet<String> = match config.rounds {
        Rounds::Single => findings.iter().map(|f| f.answer_id.clone()).collect(),
        Rounds::Regrouped => {
            let second = regroup(&initial, config.subgroup_count, config.seed)?;
            let later = review_round(question, rubric, corpus, &second, config, backend, &mut out)?;
            out.groups.extend(second);
            let first_ids: BTreeSet<String> = findings.iter().map(|f| f.answer_id.clone()).collect();
            let second_ids: BTreeSet<String> = later.iter().map(|f| f.answer_id.clone()).collect();
            findings.extend(later);
            match config.combine {
                Combine::Union => first_ids.union(&second_ids).cloned().collect(),
                Combine::Intersection => first_ids.intersection(&second_ids).cloned().collect(),
            }
        }
    };
    findings.retain(|f| combined.contains(&f.answer_id));
    findings.sort_by(|a, b| (a.round, a.group_id, &a.answer_id).cmp(&(b.round, b.group_id, &b.answer_id)));
    out.findings = findings;
    out.queue = combined.into_iter().collect();
    Ok(out)
}

/// `(TP + TN) / N` with flagged ids as positives and injected ids as truth.
pub fn detection_accuracy(flagged: &[String], truth: &[InjectionRecord], total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let flagged: BTreeSet<&str> = flagged.iter().map(String::as_str).collect();
    let injected: BTreeSet<&str> = truth.iter().map(|r| r.answer_id.as_str()).collect();
    let tp = flagged.intersection(&injected).count();
    let fp = flagged.difference(&injected).count();
    let fn_ = injected.difference(&flagged).count();
    let tn = total.saturating_sub(tp + fp + fn_);
    (tp + tn) as f64 / total as f64
}

#[cfg(test)]
mod tests;
