use crate::corpus::{Answer, Question, Rubric};
use crate::llm::{PromptBundle, Task, TaskEnvelope};
use crate::prompt::{self, fmt_score, render};

use super::{Example, GradeError, GradingOptions, StrategyKind};

pub(crate) fn supplementary_section(q: &Question) -> String {
    match &q.supplementary {
        Some(s) if !s.trim().is_empty() => format!("\n## Supplementary material\n{s}\n"),
        _ => String::new(),
    }
}

pub(crate) fn question_slots<'a>(q: &'a Question, rubric: &'a Rubric, full: &'a str, supp: &'a str) -> Vec<(&'a str, &'a str)> {
    vec![("full_points", full), ("question", q.text.as_str()), ("supplementary", supp), ("rubric", rubric.body.as_str())]
}

pub(crate) fn answer_block(a: &Answer) -> String {
    format!("### Answer {}\n{}\n", a.id, a.text.trim_end())
}

pub(crate) fn example_section(example: &Example) -> Result<String, GradeError> {
    let rationale = example.rationale.as_deref().map(|r| format!("Rationale: {r}\n")).unwrap_or_default();
    Ok(render(
        prompt::EXAMPLE_SECTION,
        &[
            ("example_answer", example.text.trim_end()),
            ("example_score", &fmt_score(example.score)),
            ("example_rationale", &rationale),
        ],
    )?)
}

/// Grade envelope shared by every grading request.
pub(crate) fn grade_envelope(rubric: &Rubric, answers: &[&Answer], kind: StrategyKind, pass_seed: u64) -> TaskEnvelope {
    TaskEnvelope::new(Task::Grade, &rubric.question_id, rubric.version, answers.iter().map(|a| a.id.clone()).collect())
        .with_param("rubric", rubric.id())
        .with_param("seed", pass_seed)
        .with_param("strategy", kind.as_str())
}

/// Builds the grading prompt for `kind`. Answers are emitted in the order
/// given; callers pass them in ascending id order.
pub fn build_grading_prompt(
    kind: StrategyKind,
    question: &Question,
    rubric: &Rubric,
    answers: &[&Answer],
    example: Option<&Example>,
    options: &GradingOptions,
    pass_seed: u64,
) -> Result<PromptBundle, GradeError> {
    if answers.is_empty() {
        return Err(GradeError::Invalid("grading prompt without answers".into()));
    }
    if kind != StrategyKind::Batching && answers.len() != 1 {
        return Err(GradeError::Invalid(format!("{} prompt takes one answer, got {}", kind.as_str(), answers.len())));
    }
    if kind == StrategyKind::OneShot && example.is_none() {
        return Err(GradeError::Invalid("one-shot prompt needs an example".into()));
    }

    let full = fmt_score(question.full_points);
    let supp = supplementary_section(question);
    let slots = question_slots(question, rubric, &full, &supp);

    let mut text = String::new();
    text.push_str(if kind == StrategyKind::Batching { prompt::GRADE_BATCH_INTRO } else { prompt::GRADE_SINGLE_INTRO });
    text.push_str("\n\n");
    text.push_str(&render(prompt::QUESTION_SECTION, &slots)?);
    text.push('\n');
    if let (StrategyKind::OneShot, Some(ex)) = (kind, example) {
        text.push_str(&example_section(ex)?);
        text.push('\n');
    }
    text.push_str("## Student answers\n");
    for a in answers {
        text.push_str(&answer_block(a));
        text.push('\n');
    }
    text.push_str(&render(prompt::GRADE_OUTPUT, &slots)?);

    let envelope = grade_envelope(rubric, answers, kind, pass_seed);
    let bundle = PromptBundle::new(prompt::GRADER_SYSTEM, vec![text], envelope, options.temperature, options.max_tokens)?;
    let chars = bundle.char_len();
    if chars > options.context_budget_chars {
        return Err(GradeError::ContextBudget { chars, budget: options.context_budget_chars });
    }
    Ok(bundle)
}
