//! Minimal `{{slot}}` template rendering and the prompt texts used by the
//! three stages.

use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template references unbound slot `{0}`")]
    Unbound(String),
    #[error("unterminated slot starting at byte {0}")]
    Unterminated(usize),
}

/// Substitutes every `{{name}}` in `template`. Values are inserted
/// verbatim and never re-scanned.
pub fn render(template: &str, slots: &[(&str, &str)]) -> Result<String, TemplateError> {
    let map: HashMap<&str, &str> = slots.iter().copied().collect();
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    let mut offset = 0;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or(TemplateError::Unterminated(offset + open))?;
        let name = after[..close].trim();
        let value = map.get(name).ok_or_else(|| TemplateError::Unbound(name.to_string()))?;
        out.push_str(value);
        let consumed = open + 2 + close + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Score text without trailing zeros: `11`, `14.5`, `14.333`.
pub fn fmt_score(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        let s = format!("{x:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

pub const GRADER_SYSTEM: &str = "You are an experienced teaching assistant. You grade student answers strictly according to the rubric you are given and write short, constructive feedback for each student.";

pub const QUESTION_SECTION: &str = "## Question (full points: {{full_points}})\n{{question}}\n{{supplementary}}\n## Rubric\n{{rubric}}\n";

pub const GRADE_SINGLE_INTRO: &str = "Grade the following student answer using the rubric.";

pub const GRADE_BATCH_INTRO: &str = "Grade each of the following student answers using the rubric. Consider the answers jointly so that equally good answers receive equal scores.";

pub const EXAMPLE_SECTION: &str = "## Example\nThe following answer was graded by a human expert. Use it as a reference for how the rubric is applied.\n### Example answer\n{{example_answer}}\nScore: {{example_score}}\n{{example_rationale}}";

pub const GRADE_OUTPUT: &str = "## Output format\nReply with one fenced JSON block and nothing else inside it:\n```json\n{\"scores\": [{\"answer_id\": \"<answer id>\", \"score\": <number from 0 to {{full_points}}>, \"feedback\": \"<feedback for the student>\"}]}\n```\nInclude exactly one entry for each answer id listed above.";

pub const REFLECTION_TURN: &str = "Your previous assessment of answer {{answer_id}} gave {{score}} points with this rationale:\n{{feedback}}\n\nReflect on that assessment. Re-read the rubric and the student answer, check each criterion again, and provide a more robust score and rationale in the same JSON format.";

pub const REASK_TURN: &str = "Your previous reply could not be parsed. Reply again with only the fenced JSON block in the required format.";

pub const RUBRIC_SYSTEM: &str = "You are an expert instructor who designs grading rubrics for open-ended exam questions.";

pub const RUBRIC_PROMPT: &str = "Improve the grading rubric for the question below. You are given the current rubric and a sample of student answers together with the scores and reasons assigned by a human grader. Study how the human grader applied the rubric, then write a refined rubric that would lead a grader to the same scores.\n\n## Question (full points: {{full_points}})\n{{question}}\n{{supplementary}}\n## Current rubric\n{{rubric}}\n\n## Human-graded samples\n{{sample_studata}}\n## Output format\nWrite the complete refined rubric. It must contain a reference answer followed by itemized scoring criteria, each with its point allocation, including partial-credit rules for the kinds of answers seen in the samples. Reply with the rubric text only.";

pub const REVIEW_SYSTEM: &str = "You are a senior grader reviewing scores assigned by another grader.";

pub const REVIEW_PROMPT: &str = "Review the graded answers below.\n\n## Question (full points: {{full_points}})\n{{question}}\n{{supplementary}}\n## Rubric\n{{rubric}}\n\n## Graded answers\n{{pairs}}\n## What to check\n1. For each answer, whether its score deviates significantly from the requirements of the rubric.\n2. Whether there are significant inconsistencies among the scores of these answers.\n\n## Output format\nReply with one fenced JSON block:\n```json\n{\"anomalies\": [{\"answer_id\": \"<answer id>\", \"reason\": \"rubric_deviation\" or \"inconsistency\", \"detail\": \"<why>\"}]}\n```\nUse an empty list if every score is reasonable.";
