//! OS-style dataset: one JSON document per question.
//!
//! ```json
//! { "id": "q1", "text": "...", "full_points": 15, "supplementary": "...",
//!   "rubrics": [{"granularity": "fine_human", "body": "..."}],
//!   "answers": [{"id": "a1", "student_id": "s1", "text": "...",
//!                "human_scores": [13, 10, 10]}] }
//! ```
//!
//! `path` may name a single document or a directory; in the latter case
//! every `*.json` file in it is loaded in file-name order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Answer, Corpus, CorpusError, DatasetTag, Granularity, Question, Rubric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsRubric {
    pub granularity: Granularity,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsAnswer {
    pub id: String,
    pub student_id: String,
    pub text: String,
    #[serde(default)]
    pub human_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsQuestionFile {
    pub id: String,
    pub text: String,
    pub full_points: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supplementary: Option<String>,
    #[serde(default = "default_tag", skip_serializing_if = "is_os")]
    pub dataset_tag: DatasetTag,
    #[serde(default)]
    pub rubrics: Vec<OsRubric>,
    #[serde(default)]
    pub answers: Vec<OsAnswer>,
}

fn default_tag() -> DatasetTag {
    DatasetTag::Os
}

fn is_os(tag: &DatasetTag) -> bool {
    *tag == DatasetTag::Os
}

impl OsQuestionFile {
    fn into_corpus(self) -> Corpus {
        let mut corpus = Corpus::default();
        for r in self.rubrics {
            corpus.rubrics.push(Rubric::seed(&self.id, r.granularity, r.body));
        }
        for a in self.answers {
            if !a.human_scores.is_empty() {
                corpus.human_scores.insert(a.id.clone(), a.human_scores);
            }
            corpus.answers.push(Answer {
                id: a.id,
                question_id: self.id.clone(),
                student_id: a.student_id,
                text: a.text,
            });
        }
        corpus.questions.push(Question {
            id: self.id,
            text: self.text,
            full_points: self.full_points,
            supplementary: self.supplementary,
            dataset_tag: self.dataset_tag,
        });
        corpus
    }

    /// Serializes one question of `corpus` back into the document shape.
    pub fn from_corpus(corpus: &Corpus, question_id: &str) -> Option<Self> {
        let q = corpus.question(question_id)?;
        let rubrics = corpus
            .rubrics
            .iter()
            .filter(|r| r.question_id == q.id && r.version == 0 && r.granularity.is_human())
            .map(|r| OsRubric { granularity: r.granularity, body: r.body.clone() })
            .collect();
        let answers = corpus
            .answers
            .iter()
            .filter(|a| a.question_id == q.id)
            .map(|a| OsAnswer {
                id: a.id.clone(),
                student_id: a.student_id.clone(),
                text: a.text.clone(),
                human_scores: corpus.individual_scores(&a.id).to_vec(),
            })
            .collect();
        Some(OsQuestionFile {
            id: q.id.clone(),
            text: q.text.clone(),
            full_points: q.full_points,
            supplementary: q.supplementary.clone(),
            dataset_tag: q.dataset_tag,
            rubrics,
            answers,
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

fn load_file(path: &Path) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let doc: OsQuestionFile = serde_json::from_str(&text)
        .map_err(|e| CorpusError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    let corpus = doc.into_corpus();
    corpus.validate()?;
    Ok(corpus)
}

pub fn load_os_dataset(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let meta = fs::metadata(path).map_err(io_err(path))?;
    if !meta.is_dir() {
        return load_file(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    files.sort();
    let mut corpus = Corpus::default();
    for file in files {
        corpus.extend(load_file(&file)?)?;
    }
    Ok(corpus)
}

/// Writes one `<question id>.json` document per question into `dir`.
pub fn write_os_dataset(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, CorpusError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for q in &corpus.questions {
        let doc = OsQuestionFile::from_corpus(corpus, &q.id).expect("question exists");
        let path = dir.join(format!("{}.json", q.id));
        let text = serde_json::to_string_pretty(&doc).expect("serializable");
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
