use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::RubricError;
use crate::corpus::{Answer, Corpus, Question, Rubric};
use crate::grader::Example;
use crate::prompt::fmt_score;
use crate::store::{Artifact, ArtifactKind};

/// A human score `g_i` for a sampled answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub question_id: String,
    pub answer_id: String,
    pub text: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub iteration: u32,
}

impl LabeledPair {
    pub fn to_example(&self) -> Example {
        Example { answer_id: self.answer_id.clone(), text: self.text.clone(), score: self.score, rationale: self.rationale.clone() }
    }
}

impl Artifact for LabeledPair {
    const KIND: ArtifactKind = ArtifactKind::Labels;
}

/// Source of human labels.
pub trait Labeler {
    fn label(&mut self, question: &Question, rubric: &Rubric, answer: &Answer) -> Result<(f64, Option<String>), RubricError>;
}

/// Reads `human_final` from the dataset.
pub struct LookupLabeler<'a> {
    pub corpus: &'a Corpus,
}

impl Labeler for LookupLabeler<'_> {
    fn label(&mut self, _: &Question, _: &Rubric, answer: &Answer) -> Result<(f64, Option<String>), RubricError> {
        self.corpus
            .human_final(&answer.id)
            .map(|s| (s, None))
            .ok_or_else(|| RubricError::MissingLabel(answer.id.clone()))
    }
}

/// Prompts a person on a terminal-like stream for each answer.
pub struct InteractiveLabeler<R, W> {
    input: R,
    output: W,
}

impl<R: BufRead, W: Write> InteractiveLabeler<R, W> {
    pub fn new(input: R, output: W) -> Self {
        InteractiveLabeler { input, output }
    }

    fn read_line(&mut self) -> Result<String, RubricError> {
        let mut line = String::new();
        if self.input.read_line(&mut line)? == 0 {
            return Err(RubricError::TerminalClosed);
        }
        Ok(line.trim().to_string())
    }
}

impl<R: BufRead, W: Write> Labeler for InteractiveLabeler<R, W> {
    fn label(&mut self, question: &Question, rubric: &Rubric, answer: &Answer) -> Result<(f64, Option<String>), RubricError> {
        let full = question.full_points;
        writeln!(self.output, "\n=== Question {} (full points: {}) ===\n{}", question.id, fmt_score(full), question.text)?;
        writeln!(self.output, "--- Rubric v{} ---\n{}", rubric.version, rubric.body)?;
        writeln!(self.output, "--- Answer {} ---\n{}", answer.id, answer.text)?;
        let score = loop {
            write!(self.output, "Score [0-{}]: ", fmt_score(full))?;
            self.output.flush()?;
            let line = self.read_line()?;
            match line.parse::<f64>() {
                Ok(s) if s.is_finite() && (0.0..=full).contains(&s) => break s,
                _ => writeln!(self.output, "Please enter a number between 0 and {}.", fmt_score(full))?,
            }
        };
        write!(self.output, "Rationale (optional): ")?;
        self.output.flush()?;
        let rationale = self.read_line()?;
        Ok((score, (!rationale.is_empty()).then_some(rationale)))
    }
}

/// Labels every answer of `ids` in order.
pub fn human_label(
    corpus: &Corpus,
    question: &Question,
    rubric: &Rubric,
    ids: &[String],
    iteration: u32,
    labeler: &mut dyn Labeler,
) -> Result<Vec<LabeledPair>, RubricError> {
    ids.iter()
        .map(|id| {
            let answer = corpus.answer(id).ok_or_else(|| RubricError::MissingLabel(id.clone()))?;
            let (score, rationale) = labeler.label(question, rubric, answer)?;
            Ok(LabeledPair {
                question_id: question.id.clone(),
                answer_id: id.clone(),
                text: answer.text.clone(),
                score,
                rationale,
                iteration,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::toy_corpus;

    #[test]
    fn interactive_reprompts_out_of_range() {
        let corpus = toy_corpus(1);
        let q = &corpus.questions[0];
        let r = &corpus.rubrics[0];
        let mut out = Vec::new();
        let mut labeler = InteractiveLabeler::new("16\nabc\n12.5\nclear argument\n".as_bytes(), &mut out);
        let (score, rationale) = labeler.label(q, r, &corpus.answers[0]).unwrap();
        assert_eq!(score, 12.5);
        assert_eq!(rationale.as_deref(), Some("clear argument"));
        let shown = String::from_utf8(out).unwrap();
        assert_eq!(shown.matches("Please enter a number").count(), 2);
        assert!(shown.contains(&r.body));
    }

    #[test]
    fn interactive_detects_closed_input() {
        let corpus = toy_corpus(1);
        let mut labeler = InteractiveLabeler::new("".as_bytes(), Vec::new());
        let err = labeler.label(&corpus.questions[0], &corpus.rubrics[0], &corpus.answers[0]).unwrap_err();
        assert!(matches!(err, RubricError::TerminalClosed));
    }

    #[test]
    fn lookup_requires_labels() {
        let mut corpus = toy_corpus(2);
        corpus.human_scores.remove("a02");
        let mut labeler = LookupLabeler { corpus: &corpus };
        let q = corpus.questions[0].clone();
        let r = corpus.rubrics[0].clone();
        let ok = human_label(&corpus, &q, &r, &["a01".into()], 1, &mut labeler).unwrap();
        assert_eq!(ok[0].score, 1.0);
        assert!(matches!(
            human_label(&corpus, &q, &r, &["a02".into()], 1, &mut labeler),
            Err(RubricError::MissingLabel(id)) if id == "a02"
        ));
    }
}
