//! Extraction of structured grade and review replies.
//!
//! Models are asked to answer with a fenced JSON block. The parser scans
//! every fenced block in order (skipping the echoed `task` envelope), then
//! falls back to the bare text, and returns the first candidate that
//! matches the expected schema.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::envelope::ENVELOPE_FENCE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    /// `{"scores": [{"answer_id", "score", "feedback"?}]}`
    Grade,
    /// `{"anomalies": [{"answer_id", "reason", "detail"?}]}`
    Review,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedScore {
    pub answer_id: String,
    pub score: f64,
    #[serde(default)]
    pub feedback: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    RubricDeviation,
    Inconsistency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedFlag {
    pub answer_id: String,
    pub reason: FlagReason,
    #[serde(default)]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Parsed {
    Scores(Vec<ParsedScore>),
    Flags(Vec<ParsedFlag>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("reply contains no parsable JSON block")]
    NoBlock,
    #[error("reply JSON does not match the expected schema: {0}")]
    SchemaMismatch(String),
    #[error("score {score} for `{answer_id}` outside [0, {full_points}]")]
    OutOfRange { answer_id: String, score: f64, full_points: f64 },
}

impl ParseError {
    /// Whether a re-ask is worthwhile (nothing usable came back).
    pub fn is_unparsable(&self) -> bool {
        matches!(self, ParseError::NoBlock)
    }
}

/// Fenced block bodies in order of appearance, excluding envelope blocks.
fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let (info, body_start) = match after.find('\n') {
            Some(nl) => (after[..nl].trim(), nl + 1),
            None => break,
        };
        let body = &after[body_start..];
        let Some(close) = body.find("```") else { break };
        if info != ENVELOPE_FENCE {
            out.push(body[..close].trim());
        }
        rest = &body[close + 3..];
    }
    out
}

fn match_schema(value: &Value, schema: Schema) -> Result<Parsed, String> {
    match schema {
        Schema::Grade => {
            let scores = value.get("scores").ok_or("missing `scores` array")?;
            let scores: Vec<ParsedScore> = serde_json::from_value(scores.clone()).map_err(|e| e.to_string())?;
            Ok(Parsed::Scores(scores))
        }
        Schema::Review => {
            let list = value.get("anomalies").ok_or("missing `anomalies` array")?;
            let list = list.as_array().ok_or("`anomalies` is not an array")?;
            let mut flags = Vec::with_capacity(list.len());
            for item in list {
                let answer_id = item
                    .get("answer_id")
                    .and_then(Value::as_str)
                    .ok_or("anomaly without `answer_id`")?
                    .to_string();
                let reason = match item.get("reason").and_then(Value::as_str) {
                    Some("rubric_deviation") => FlagReason::RubricDeviation,
                    _ => FlagReason::Inconsistency,
                };
                let detail = item.get("detail").and_then(Value::as_str).unwrap_or_default().to_string();
                flags.push(ParsedFlag { answer_id, reason, detail });
            }
            Ok(Parsed::Flags(flags))
        }
    }
}

/// Parses the first schema-conforming JSON block in `text`. Scores are
/// bound-checked against `full_points`.
pub fn parse_structured(text: &str, schema: Schema, full_points: f64) -> Result<Parsed, ParseError> {
    let mut candidates = fenced_blocks(text);
    candidates.push(text.trim());
    let mut mismatch = None;
    for candidate in candidates {
        let Ok(value) = serde_json::from_str::<Value>(candidate) else { continue };
        match match_schema(&value, schema) {
            Ok(parsed) => {
                if let Parsed::Scores(scores) = &parsed {
                    for s in scores {
                        if !(s.score.is_finite() && s.score >= 0.0 && s.score <= full_points) {
                            return Err(ParseError::OutOfRange {
                                answer_id: s.answer_id.clone(),
                                score: s.score,
                                full_points,
                            });
                        }
                    }
                }
                return Ok(parsed);
            }
            Err(e) => {
                mismatch.get_or_insert(e);
            }
        }
    }
    Err(mismatch.map(ParseError::SchemaMismatch).unwrap_or(ParseError::NoBlock))
}

pub fn parse_scores(text: &str, full_points: f64) -> Result<Vec<ParsedScore>, ParseError> {
    match parse_structured(text, Schema::Grade, full_points)? {
        Parsed::Scores(s) => Ok(s),
        Parsed::Flags(_) => unreachable!("grade schema yields scores"),
    }
}

pub fn parse_flags(text: &str) -> Result<Vec<ParsedFlag>, ParseError> {
    match parse_structured(text, Schema::Review, f64::INFINITY)? {
        Parsed::Flags(f) => Ok(f),
        Parsed::Scores(_) => unreachable!("review schema yields flags"),
    }
}

/// Renders scores in the reply shape the parser accepts.
pub fn render_scores(scores: &[ParsedScore]) -> String {
    let body = serde_json::json!({ "scores": scores });
    format!("```json\n{body}\n```")
}

pub fn render_flags(flags: &[ParsedFlag]) -> String {
    let body = serde_json::json!({ "anomalies": flags });
    format!("```json\n{body}\n```")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prose_around_block() {
        let text = "Here is my grading.\n```json\n{\"scores\":[{\"answer_id\":\"a1\",\"score\":11,\"feedback\":\"ok\"}]}\n```\nThanks!";
        let scores = parse_scores(text, 15.0).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].score, 11.0);
        assert_eq!(scores[0].feedback, "ok");
    }

    #[test]
    fn first_valid_block_wins() {
        let text = "```\nnot json\n```\n```json\n{\"scores\":[{\"answer_id\":\"a1\",\"score\":3}]}\n```\n```json\n{\"scores\":[{\"answer_id\":\"a1\",\"score\":9}]}\n```";
        assert_eq!(parse_scores(text, 15.0).unwrap()[0].score, 3.0);
    }

    #[test]
    fn out_of_range_is_reported() {
        let text = "```json\n{\"scores\":[{\"answer_id\":\"a1\",\"score\":99}]}\n```";
        assert!(matches!(parse_scores(text, 15.0), Err(ParseError::OutOfRange { .. })));
    }

    #[test]
    fn bare_json_and_failures() {
        assert_eq!(parse_scores("{\"scores\":[]}", 5.0).unwrap(), vec![]);
        assert_eq!(parse_scores("no json here", 5.0), Err(ParseError::NoBlock));
        assert!(matches!(parse_scores("```json\n{\"grades\":1}\n```", 5.0), Err(ParseError::SchemaMismatch(_))));
    }

    #[test]
    fn envelope_echo_is_ignored() {
        let text = "```task\n{\"scores\":[{\"answer_id\":\"zz\",\"score\":1}]}\n```\n```json\n{\"anomalies\":[{\"answer_id\":\"a3\",\"reason\":\"rubric_deviation\",\"detail\":\"too high\"}]}\n```";
        let flags = parse_flags(text).unwrap();
        assert_eq!(flags, vec![ParsedFlag { answer_id: "a3".into(), reason: FlagReason::RubricDeviation, detail: "too high".into() }]);
    }

    #[test]
    fn rendered_replies_parse_back() {
        let scores = vec![ParsedScore { answer_id: "a".into(), score: 2.5, feedback: "f".into() }];
        assert_eq!(parse_scores(&render_scores(&scores), 5.0).unwrap(), scores);
        let flags = vec![ParsedFlag { answer_id: "b".into(), reason: FlagReason::Inconsistency, detail: String::new() }];
        assert_eq!(parse_flags(&render_flags(&flags)).unwrap(), flags);
    }

    proptest! {
        #[test]
        fn never_panics_on_arbitrary_text(text in "\\PC*") {
            let _ = parse_structured(&text, Schema::Grade, 10.0);
            let _ = parse_structured(&text, Schema::Review, 10.0);
        }

        #[test]
        fn never_panics_on_fence_soup(parts in prop::collection::vec(
            prop_oneof![
                Just("```".to_string()), Just("```json\n".to_string()), Just("\n".to_string()),
                Just("{\"scores\":[".to_string()), Just("]}".to_string()), Just("é".to_string()),
                Just("{\"answer_id\":\"a\",\"score\":1}".to_string()), "[a-z{}\\[\\]\":,]{0,8}",
            ], 0..20)) {
            let text = parts.concat();
            let _ = parse_structured(&text, Schema::Grade, 10.0);
            let _ = parse_structured(&text, Schema::Review, 10.0);
        }
    }
}
