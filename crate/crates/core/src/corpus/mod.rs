//! Dataset ingestion, ground-truth resolution and anomaly injection.
//!
//! Two on-disk dataset shapes are supported: the OS-style one-JSON-document
//! per question layout ([`os`]) and the Mohler-style delimited table
//! ([`mohler`]). Both load into the same immutable [`Corpus`].

mod inject;
pub mod mohler;
pub mod os;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use inject::{inject_anomalies, perturb_score, InjectionRecord, INJECTION_CEILING, INJECTION_FLOOR};
pub use mohler::{load_mohler_dataset, write_mohler_dataset, MOHLER_FULL_POINTS};
pub use os::{load_os_dataset, write_os_dataset, OsAnswer, OsQuestionFile, OsRubric};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid injection request: {0}")]
    Injection(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetTag {
    Os,
    Mohler,
    Synthetic,
}

impl std::str::FromStr for DatasetTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "os" => Ok(Self::Os),
            "mohler" => Ok(Self::Mohler),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(format!("unknown dataset tag `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub full_points: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supplementary: Option<String>,
    pub dataset_tag: DatasetTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    CoarseHuman,
    FineHuman,
    GeneratedRandom,
    GeneratedDistribution,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::CoarseHuman,
        Granularity::FineHuman,
        Granularity::GeneratedRandom,
        Granularity::GeneratedDistribution,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::CoarseHuman => "coarse_human",
            Granularity::FineHuman => "fine_human",
            Granularity::GeneratedRandom => "generated_random",
            Granularity::GeneratedDistribution => "generated_distribution",
        }
    }

    pub fn is_human(self) -> bool {
        matches!(self, Granularity::CoarseHuman | Granularity::FineHuman)
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown rubric granularity `{s}`"))
    }
}

/// One version of the scoring guide for a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    pub question_id: String,
    pub version: u32,
    pub body: String,
    pub granularity: Granularity,
    /// Id of the predecessor version, see [`Rubric::id`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<String>,
}

impl Rubric {
    /// A human-authored starting rubric (version 0, no lineage).
    pub fn seed(question_id: &str, granularity: Granularity, body: impl Into<String>) -> Self {
        Rubric {
            question_id: question_id.to_string(),
            version: 0,
            body: body.into(),
            granularity,
            lineage: None,
        }
    }

    pub fn id(&self) -> String {
        format!("{}/{}/v{}", self.question_id, self.granularity.as_str(), self.version)
    }

    /// Builds the successor version of `self` with the given body.
    pub fn successor(&self, body: impl Into<String>, granularity: Granularity) -> Rubric {
        Rubric {
            question_id: self.question_id.clone(),
            version: self.version + 1,
            body: body.into(),
            granularity,
            lineage: Some(self.id()),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.body.trim().is_empty() {
            return Err(CorpusError::Validation(format!("rubric {} has an empty body", self.id())));
        }
        match (self.version, &self.lineage) {
            (0, Some(_)) => Err(CorpusError::Validation(format!(
                "rubric {} is version 0 but has a lineage",
                self.id()
            ))),
            (v, None) if v > 0 => Err(CorpusError::Validation(format!(
                "rubric {} has no lineage",
                self.id()
            ))),
            _ => Ok(()),
        }
    }
}

/// Checks that `chain` is `r_0 .. r_t` with consecutive versions and that
/// every lineage pointer resolves to the preceding element.
pub fn validate_chain(chain: &[Rubric]) -> Result<(), CorpusError> {
    for (i, rubric) in chain.iter().enumerate() {
        rubric.validate()?;
        if rubric.version as usize != i {
            return Err(CorpusError::Validation(format!(
                "rubric chain position {i} holds version {}",
                rubric.version
            )));
        }
        if i > 0 {
            let parent = &chain[i - 1];
            if rubric.lineage.as_deref() != Some(parent.id().as_str()) {
                return Err(CorpusError::Validation(format!(
                    "rubric {} does not point at {}",
                    rubric.id(),
                    parent.id()
                )));
            }
            if rubric.question_id != parent.question_id {
                return Err(CorpusError::Validation("rubric chain spans questions".into()));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub id: String,
    pub question_id: String,
    pub student_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    HumanFinal,
    HumanIndividual(usize),
    Llm,
    Injected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAnswer {
    pub answer_id: String,
    pub score: f64,
    pub scorer: Scorer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl ScoredAnswer {
    pub fn new(answer_id: impl Into<String>, score: f64, scorer: Scorer) -> Self {
        ScoredAnswer { answer_id: answer_id.into(), score, scorer, rationale: None }
    }
}

/// Arithmetic mean of the individual grader scores.
pub fn resolve_human_final(scores: &[f64]) -> Result<f64, CorpusError> {
    if scores.is_empty() {
        return Err(CorpusError::Validation("cannot resolve a final score from no grader scores".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn check_score(score: f64, full_points: f64, context: &str) -> Result<(), CorpusError> {
    if !score.is_finite() || score < 0.0 || score > full_points {
        return Err(CorpusError::Validation(format!(
            "{context}: score {score} outside [0, {full_points}]"
        )));
    }
    Ok(())
}

/// An immutable, validated collection of questions, rubrics, answers and
/// human scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub questions: Vec<Question>,
    pub rubrics: Vec<Rubric>,
    pub answers: Vec<Answer>,
    /// Individual grader scores per answer, in grader order.
    pub human_scores: BTreeMap<String, Vec<f64>>,
}

impl Corpus {
    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn answer(&self, id: &str) -> Option<&Answer> {
        self.answers.iter().find(|a| a.id == id)
    }

    /// Answers for a question in ascending id order.
    pub fn answers_for(&self, question_id: &str) -> Vec<&Answer> {
        let mut answers: Vec<&Answer> =
            self.answers.iter().filter(|a| a.question_id == question_id).collect();
        answers.sort_by(|a, b| a.id.cmp(&b.id));
        answers
    }

    pub fn rubric(&self, question_id: &str, granularity: Granularity) -> Option<&Rubric> {
        self.rubrics
            .iter()
            .find(|r| r.question_id == question_id && r.granularity == granularity)
    }

    /// Finest human rubric available for the question, used as `r_0`.
    pub fn base_rubric(&self, question_id: &str) -> Option<&Rubric> {
        self.rubric(question_id, Granularity::FineHuman)
            .or_else(|| self.rubric(question_id, Granularity::CoarseHuman))
    }

    pub fn individual_scores(&self, answer_id: &str) -> &[f64] {
        self.human_scores.get(answer_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn human_final(&self, answer_id: &str) -> Option<f64> {
        resolve_human_final(self.individual_scores(answer_id)).ok()
    }

    /// `human_final` scores for a question as [`ScoredAnswer`]s, ascending id.
    /// Unlabeled answers are skipped.
    pub fn human_final_pairs(&self, question_id: &str) -> Vec<ScoredAnswer> {
        self.answers_for(question_id)
            .into_iter()
            .filter_map(|a| {
                self.human_final(&a.id)
                    .map(|s| ScoredAnswer::new(a.id.clone(), s, Scorer::HumanFinal))
            })
            .collect()
    }

    pub fn full_points_for_answer(&self, answer_id: &str) -> Option<f64> {
        let answer = self.answer(answer_id)?;
        self.question(&answer.question_id).map(|q| q.full_points)
    }

    /// Appends another corpus, then re-validates the union.
    pub fn extend(&mut self, other: Corpus) -> Result<(), CorpusError> {
        self.questions.extend(other.questions);
        self.rubrics.extend(other.rubrics);
        self.answers.extend(other.answers);
        for (id, scores) in other.human_scores {
            if self.human_scores.insert(id.clone(), scores).is_some() {
                return Err(CorpusError::Validation(format!("duplicate answer id `{id}`")));
            }
        }
        self.validate()
    }

    /// Checks every type invariant of the corpus.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut question_ids = HashSet::new();
        for q in &self.questions {
            if !question_ids.insert(q.id.as_str()) {
                return Err(CorpusError::Validation(format!("duplicate question id `{}`", q.id)));
            }
            if !(q.full_points.is_finite() && q.full_points > 0.0) {
                return Err(CorpusError::Validation(format!(
                    "question `{}` has non-positive full points {}",
                    q.id, q.full_points
                )));
            }
        }
        for r in &self.rubrics {
            if !question_ids.contains(r.question_id.as_str()) {
                return Err(CorpusError::Validation(format!(
                    "rubric for unknown question `{}`",
                    r.question_id
                )));
            }
            r.validate()?;
        }
        let mut answer_ids = HashSet::new();
        let mut students = HashSet::new();
        for a in &self.answers {
            if !answer_ids.insert(a.id.as_str()) {
                return Err(CorpusError::Validation(format!("duplicate answer id `{}`", a.id)));
            }
            if !question_ids.contains(a.question_id.as_str()) {
                return Err(CorpusError::Validation(format!(
                    "answer `{}` references unknown question `{}`",
                    a.id, a.question_id
                )));
            }
            if !students.insert((a.question_id.as_str(), a.student_id.as_str())) {
                return Err(CorpusError::Validation(format!(
                    "student `{}` answered question `{}` twice",
                    a.student_id, a.question_id
                )));
            }
            if a.text.trim().is_empty() {
                return Err(CorpusError::Validation(format!("answer `{}` has empty text", a.id)));
            }
        }
        for (answer_id, scores) in &self.human_scores {
            let full = self.full_points_for_answer(answer_id).ok_or_else(|| {
                CorpusError::Validation(format!("scores for unknown answer `{answer_id}`"))
            })?;
            for s in scores {
                check_score(*s, full, &format!("answer `{answer_id}`"))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn human_final_is_the_mean() {
        assert_eq!(resolve_human_final(&[13.0, 10.0, 10.0]).unwrap(), 11.0);
        assert_eq!(resolve_human_final(&[4.25]).unwrap(), 4.25);
        assert_eq!(resolve_human_final(&[0.0, 15.0]).unwrap(), 7.5);
        assert!(resolve_human_final(&[]).is_err());
    }

    #[test]
    fn chain_validation() {
        let r0 = Rubric::seed("q1", Granularity::FineHuman, "base");
        let r1 = r0.successor("next", Granularity::GeneratedRandom);
        let r2 = r1.successor("next2", Granularity::GeneratedRandom);
        validate_chain(&[r0.clone(), r1.clone(), r2.clone()]).unwrap();
        assert!(validate_chain(&[r0.clone(), r2.clone()]).is_err());
        let mut orphan = r1.clone();
        orphan.lineage = None;
        assert!(orphan.validate().is_err());
        let mut empty = r0;
        empty.body = "  ".into();
        assert!(empty.validate().is_err());
    }

    #[test]
    fn scorer_serializes_compactly() {
        let s = ScoredAnswer::new("a1", 3.0, Scorer::HumanIndividual(2));
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"answer_id":"a1","score":3.0,"scorer":{"human_individual":2}}"#);
        let back: ScoredAnswer = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn human_final_within_range(scores in prop::collection::vec(0.0f64..100.0, 1..10)) {
                let mean = resolve_human_final(&scores).unwrap();
                let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
            }
        }
    }
}
