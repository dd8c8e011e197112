//! Mohler-style delimited table with a header row:
//! `question_id, question, desired_answer, student_answer, score1, score2`.
//!
//! Tab and comma delimiters are both accepted (sniffed from the header).
//! The table carries no answer ids, so they are generated as
//! `<question_id>-<row index within the question, 4 digits>`.

use std::fs;
use std::path::Path;

use super::{check_score, Answer, Corpus, CorpusError, DatasetTag, Granularity, Question, Rubric};

pub const MOHLER_FULL_POINTS: f64 = 5.0;

const COLUMNS: [&str; 6] = ["question_id", "question", "desired_answer", "student_answer", "score1", "score2"];

fn parse_err(path: &Path, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse { path: path.to_path_buf(), message: message.into() }
}

pub fn load_mohler_dataset(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    parse_mohler(&text, path)
}

pub(crate) fn parse_mohler(text: &str, path: &Path) -> Result<Corpus, CorpusError> {
    let header = text.lines().next().ok_or_else(|| parse_err(path, "missing header row"))?;
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(text.as_bytes());

    let headers = reader.headers().map_err(|e| parse_err(path, e.to_string()))?.clone();
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    if names != COLUMNS {
        return Err(parse_err(path, format!("expected columns {COLUMNS:?}, found {names:?}")));
    }

    let mut corpus = Corpus::default();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| parse_err(path, format!("line {line}: {e}")))?;
        if record.len() != COLUMNS.len() {
            return Err(parse_err(path, format!("line {line}: expected 6 fields")));
        }
        let qid = record[0].trim().to_string();
        if corpus.question(&qid).is_none() {
            corpus.questions.push(Question {
                id: qid.clone(),
                text: record[1].to_string(),
                full_points: MOHLER_FULL_POINTS,
                supplementary: None,
                dataset_tag: DatasetTag::Mohler,
            });
            corpus.rubrics.push(Rubric::seed(&qid, Granularity::CoarseHuman, record[2].to_string()));
        }
        let index = corpus.answers.iter().filter(|a| a.question_id == qid).count() + 1;
        let answer_id = format!("{qid}-{index:04}");
        let mut scores = Vec::with_capacity(2);
        for col in [4, 5] {
            let raw = record[col].trim();
            let score: f64 = raw
                .parse()
                .map_err(|_| parse_err(path, format!("line {line}: score `{raw}` is not a number")))?;
            check_score(score, MOHLER_FULL_POINTS, &format!("line {line}"))?;
            scores.push(score);
        }
        corpus.human_scores.insert(answer_id.clone(), scores);
        corpus.answers.push(Answer {
            id: answer_id,
            question_id: qid,
            student_id: format!("s{index:04}"),
            text: record[3].to_string(),
        });
    }
    corpus.validate()?;
    Ok(corpus)
}

/// Renders the corpus in the tab-separated layout. Every answer must carry
/// exactly two grader scores.
pub fn write_mohler_dataset(corpus: &Corpus) -> Result<String, CorpusError> {
    let mut writer = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    let io = |e: csv::Error| CorpusError::Validation(e.to_string());
    writer.write_record(COLUMNS).map_err(io)?;
    for q in &corpus.questions {
        let desired = corpus
            .rubric(&q.id, Granularity::CoarseHuman)
            .map(|r| r.body.as_str())
            .unwrap_or_default();
        for a in corpus.answers_for(&q.id) {
            let scores = corpus.individual_scores(&a.id);
            if scores.len() != 2 {
                return Err(CorpusError::Validation(format!(
                    "answer `{}` has {} grader scores, the table needs 2",
                    a.id,
                    scores.len()
                )));
            }
            let s1 = scores[0].to_string();
            let s2 = scores[1].to_string();
            writer
                .write_record([q.id.as_str(), q.text.as_str(), desired, a.text.as_str(), &s1, &s2])
                .map_err(io)?;
        }
    }
    let bytes = writer.into_inner().map_err(|e| CorpusError::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 in, utf-8 out"))
}
