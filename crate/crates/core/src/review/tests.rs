use super::*;
use crate::corpus::{inject_anomalies, Scorer};
use crate::llm::parse::{render_flags, ParsedFlag};
use crate::llm::{Oracle, ScriptedBackend, SimulatedBackend};
use crate::testutil::toy_corpus;

fn pairs(ids: &[&str]) -> Vec<ScoredAnswer> {
    ids.iter().map(|id| ScoredAnswer::new(*id, 1.0, Scorer::Llm)).collect()
}

fn group(id: u32, ids: &[&str]) -> ReviewGroup {
    ReviewGroup { group_id: id, round: Round::Initial, members: pairs(ids) }
}

fn ids(g: &ReviewGroup) -> Vec<&str> {
    g.members.iter().map(|m| m.answer_id.as_str()).collect()
}

fn truth_pairs(corpus: &Corpus) -> Vec<ScoredAnswer> {
    corpus.human_final_pairs("q1").into_iter().map(|p| ScoredAnswer { scorer: Scorer::Llm, ..p }).collect()
}

fn flag(id: &str) -> ParsedFlag {
    ParsedFlag { answer_id: id.into(), reason: FlagReason::RubricDeviation, detail: String::new() }
}

#[test]
fn partition_sizes() {
    let forty: Vec<String> = (0..40).map(|i| format!("a{i:02}")).collect();
    let refs: Vec<&str> = forty.iter().map(String::as_str).collect();
    let groups = partition_groups(&pairs(&refs), 10, 1).unwrap();
    assert_eq!(groups.iter().map(|g| g.members.len()).collect::<Vec<_>>(), vec![10; 4]);
    assert_eq!(groups, partition_groups(&pairs(&refs), 10, 1).unwrap());

    let seven = pairs(&["a", "b", "c", "d", "e", "f", "g"]);
    let sizes: Vec<usize> = partition_groups(&seven, 3, 0).unwrap().iter().map(|g| g.members.len()).collect();
    assert_eq!(sizes, vec![3, 4]);
    let eight = pairs(&["a", "b", "c", "d", "e", "f", "g", "h"]);
    let sizes: Vec<usize> = partition_groups(&eight, 3, 0).unwrap().iter().map(|g| g.members.len()).collect();
    assert_eq!(sizes, vec![3, 3, 2]);
    assert!(matches!(partition_groups(&pairs(&["a"]), 3, 0), Err(ReviewError::TooFew(1))));
}

#[test]
fn regroup_rotation_example() {
    let groups = [group(0, &["a", "b", "c", "d"]), group(1, &["e", "f", "g", "h"])];
    for seed in 0..8 {
        let out = regroup(&groups, 2, seed).unwrap();
        assert_eq!(ids(&out[0]), vec!["a", "b", "g", "h"]);
        assert_eq!(ids(&out[1]), vec!["e", "f", "c", "d"]);
        assert!(out.iter().all(|g| g.round == Round::Regrouped));
    }
    assert!(regroup(&groups, 1, 0).is_err());
    assert!(matches!(regroup(&groups, 5, 0), Err(ReviewError::GroupTooSmall { .. })));
}

#[test]
fn review_flags_injected_member() {
    let corpus = toy_corpus(10);
    let q = &corpus.questions[0];
    let r = &corpus.rubrics[1];
    let mut members = truth_pairs(&corpus);
    members[3].score += 6.0;
    let g = ReviewGroup { group_id: 0, round: Round::Initial, members };
    let backend = SimulatedBackend::new(Oracle::from_corpus(&corpus), 0, 1.0);
    let GroupReview::Reviewed { findings, .. } = review_group(q, r, &corpus, &g, &ReviewConfig::default(), &backend).unwrap() else {
        panic!("expected a review");
    };
    assert_eq!(findings.len(), 1);
    assert_eq!(findings[0].answer_id, "a04");
}

#[test]
fn foreign_ids_are_discarded() {
    let corpus = toy_corpus(4);
    let g = ReviewGroup { group_id: 2, round: Round::Initial, members: truth_pairs(&corpus) };
    let backend = ScriptedBackend::queued([render_flags(&[flag("zz9"), flag("a02"), flag("a02")])]);
    let out = review_group(&corpus.questions[0], &corpus.rubrics[1], &corpus, &g, &ReviewConfig::default(), &backend).unwrap();
    let GroupReview::Reviewed { findings, warnings } = out else { panic!() };
    assert_eq!(findings.len(), 1);
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("zz9"));
}

#[test]
fn unparsable_twice_marks_group_unreviewed() {
    let corpus = toy_corpus(4);
    let g = ReviewGroup { group_id: 0, round: Round::Initial, members: truth_pairs(&corpus) };
    let backend = ScriptedBackend::queued(["looks fine", "still fine"]);
    let out = review_group(&corpus.questions[0], &corpus.rubrics[1], &corpus, &g, &ReviewConfig::default(), &backend).unwrap();
    assert!(matches!(out, GroupReview::Unreviewed { .. }));
}

#[test]
fn sigma_zero_review_is_empty() {
    let corpus = toy_corpus(40);
    let backend = SimulatedBackend::new(Oracle::from_corpus(&corpus), 0, 0.0);
    let cfg = ReviewConfig::default();
    let out = run_review(&corpus.questions[0], &corpus.rubrics[1], &corpus, &truth_pairs(&corpus), &cfg, &backend).unwrap();
    assert!(out.queue.is_empty());
    assert_eq!(out.groups.len(), 8);
}

#[test]
fn single_round_findings_are_initial() {
    let corpus = toy_corpus(40);
    let (injected, _) = inject_anomalies(&truth_pairs(&corpus), 15.0, 0.2, 2).unwrap();
    let backend = SimulatedBackend::new(Oracle::from_corpus(&corpus), 0, 1.5);
    let cfg = ReviewConfig { rounds: Rounds::Single, ..Default::default() };
    let out = run_review(&corpus.questions[0], &corpus.rubrics[1], &corpus, &injected, &cfg, &backend).unwrap();
    assert!(!out.findings.is_empty());
    assert!(out.findings.iter().all(|f| f.round == Round::Initial));
}

#[test]
fn round_two_only_flag_depends_on_combine() {
    let corpus = toy_corpus(4);
    let q = &corpus.questions[0];
    let r = &corpus.rubrics[1];
    let d = truth_pairs(&corpus);
    let run = |combine| {
        // c = 2 gives two initial groups and two regrouped groups
        let backend = ScriptedBackend::queued([
            render_flags(&[]),
            render_flags(&[]),
            render_flags(&[flag("a01"), flag("a02"), flag("a03"), flag("a04")]),
            render_flags(&[flag("a01"), flag("a02"), flag("a03"), flag("a04")]),
        ]);
        let cfg = ReviewConfig { group_size: 2, combine, parallelism: 1, ..Default::default() };
        run_review(q, r, &corpus, &d, &cfg, &backend).unwrap()
    };
    let union = run(Combine::Union);
    assert_eq!(union.queue.len(), 4);
    assert!(union.findings.iter().all(|f| f.round == Round::Regrouped));
    let inter = run(Combine::Intersection);
    assert!(inter.queue.is_empty());
    assert!(inter.findings.is_empty());
}

#[test]
fn accuracy_examples() {
    let rec = |id: &str| InjectionRecord { answer_id: id.into(), original_score: 0.0, injected_score: 5.0, seed: 0 };
    let truth: Vec<InjectionRecord> = (0..8).map(|i| rec(&format!("a{i:02}"))).collect();
    let all: Vec<String> = truth.iter().map(|r| r.answer_id.clone()).collect();
    assert_eq!(detection_accuracy(&all, &truth, 40), 1.0);
    let mut mixed: Vec<String> = all[..6].to_vec();
    mixed.extend(["a30".to_string(), "a31".to_string()]);
    assert!((detection_accuracy(&mixed, &truth, 40) - 0.90).abs() < 1e-12);
    assert!((detection_accuracy(&[], &truth, 40) - 0.80).abs() < 1e-12);
    assert_eq!(detection_accuracy(&[], &[], 10), 1.0);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn conservation_and_mixing(n in 4usize..60, c in 2usize..12, k in 2usize..4, seed in any::<u64>()) {
            prop_assume!(k <= c);
            let names: Vec<String> = (0..n).map(|i| format!("x{i:03}")).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let groups = partition_groups(&pairs(&refs), c, seed).unwrap();
            prop_assume!(groups.iter().all(|g| g.members.len() >= k));
            let mut before: Vec<String> = groups.iter().flat_map(|g| g.members.iter().map(|m| m.answer_id.clone())).collect();
            before.sort();
            prop_assert_eq!(&before, &names);

            let parent: BTreeMap<String, u32> = groups.iter()
                .flat_map(|g| g.members.iter().map(move |m| (m.answer_id.clone(), g.group_id)))
                .collect();
            let regrouped = regroup(&groups, k, seed).unwrap();
            let mut after: Vec<String> = regrouped.iter().flat_map(|g| g.members.iter().map(|m| m.answer_id.clone())).collect();
            after.sort();
            prop_assert_eq!(&after, &names);
            for g in &regrouped {
                let parents: BTreeSet<u32> = g.members.iter().map(|m| parent[&m.answer_id]).collect();
                prop_assert!(parents.len() >= k.min(groups.len()));
            }
        }
    }

    use std::collections::BTreeMap;
}
