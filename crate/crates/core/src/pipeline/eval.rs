use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ScoredAnswer};
use crate::grader::GradeRecord;
use crate::metrics::{aggregate, emit_table, evaluate, ExperimentReport, MetricsError, RepetitionRow, ScorePairVector, TableFormat};
use crate::store::{Artifact, ArtifactKind};

/// A rendered report stored with the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub question_id: String,
    pub label: String,
    pub report: ExperimentReport<f64>,
    pub table: String,
}

impl Artifact for ReportRecord {
    const KIND: ArtifactKind = ArtifactKind::Reports;
}

/// Human and predicted vectors for `scores`, skipping unlabeled answers.
pub fn score_pairs(corpus: &Corpus, question_id: &str, scores: &[ScoredAnswer]) -> Result<ScorePairVector<f64>, MetricsError> {
    let full = corpus.question(question_id).map_or(0.0, |q| q.full_points);
    let mut human = Vec::with_capacity(scores.len());
    let mut predicted = Vec::with_capacity(scores.len());
    for s in scores {
        if let Some(h) = corpus.human_final(&s.answer_id) {
            human.push(h);
            predicted.push(s.score);
        }
    }
    ScorePairVector::new(human, predicted, full)
}

/// One metric row per repetition present in `records`, aggregated.
pub fn evaluate_records(
    corpus: &Corpus,
    question_id: &str,
    records: &[GradeRecord],
    fingerprint: &str,
) -> Result<ExperimentReport<f64>, MetricsError> {
    let mut by_rep: BTreeMap<u32, Vec<ScoredAnswer>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.question_id == question_id) {
        by_rep.entry(r.repetition).or_default().push(to_scored(r));
    }
    let mut rows = Vec::with_capacity(by_rep.len());
    for (repetition, scores) in by_rep {
        let v = score_pairs(corpus, question_id, &scores)?;
        rows.push(RepetitionRow { fingerprint: fingerprint.to_string(), repetition, metrics: evaluate(&v) });
    }
    aggregate(&rows)
}

pub fn to_scored(r: &GradeRecord) -> ScoredAnswer {
    ScoredAnswer {
        answer_id: r.answer_id.clone(),
        score: r.score,
        scorer: crate::corpus::Scorer::Llm,
        rationale: Some(r.feedback.clone()),
    }
}

pub fn report_record(question_id: &str, label: &str, report: ExperimentReport<f64>, format: TableFormat) -> ReportRecord {
    let table = emit_table(&report, format);
    ReportRecord { question_id: question_id.to_string(), label: label.to_string(), report, table }
}
