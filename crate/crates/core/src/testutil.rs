use std::collections::BTreeMap;

use crate::corpus::{Answer, Corpus, DatasetTag, Granularity, Question, Rubric};

/// One question (full points 15) with `n` answers `a01..` whose human
/// final score is `i % 16`.
pub fn toy_corpus(n: usize) -> Corpus {
    let question = Question {
        id: "q1".into(),
        text: "Explain how a mutex prevents a race condition.".into(),
        full_points: 15.0,
        supplementary: None,
        dataset_tag: DatasetTag::Synthetic,
    };
    let mut answers = Vec::new();
    let mut human_scores = BTreeMap::new();
    for i in 1..=n {
        let id = format!("a{i:02}");
        answers.push(Answer { id: id.clone(), question_id: "q1".into(), student_id: format!("s{i:02}"), text: format!("answer text {i}") });
        let s = (i % 16) as f64;
        human_scores.insert(id, vec![s, s, s]);
    }
    Corpus {
        questions: vec![question],
        rubrics: vec![
            Rubric::seed("q1", Granularity::CoarseHuman, "Mentions mutual exclusion."),
            Rubric::seed("q1", Granularity::FineHuman, "5 pts mutual exclusion; 5 pts critical section; 5 pts example."),
        ],
        answers,
        human_scores,
    }
}

pub fn scores_reply(entries: &[(&str, f64)]) -> String {
    let items: Vec<String> = entries
        .iter()
        .map(|(id, s)| format!("{{\"answer_id\": \"{id}\", \"score\": {s}, \"feedback\": \"ok\"}}"))
        .collect();
    format!("```json\n{{\"scores\": [{}]}}\n```", items.join(", "))
}
