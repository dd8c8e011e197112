//! Acceptance run: every criterion at its pinned tolerance and time budget,
//! one PASS/FAIL line each. Exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{completion, fixture, reference, synthetic, StubServer};
use gradeflow::corpus::{
    load_mohler_dataset, load_os_dataset, validate_chain, write_mohler_dataset, write_os_dataset, Corpus, ScoredAnswer, Scorer,
};
use gradeflow::grader::{Grader, GradingOptions};
use gradeflow::llm::{
    Backend, BackendConfig, BackendKind, LlmError, OpenAiBackend, Oracle, PromptBundle, RecordingBackend, ScriptedBackend,
    SimulatedBackend, Task, TaskEnvelope,
};
use gradeflow::metrics::{cell, evaluate, nrmse_from, ScorePairVector};
use gradeflow::pipeline::experiments::exp_review;
use gradeflow::pipeline::{run_pipeline, RunConfig};
use gradeflow::review::{Combine, ReviewConfig, Rounds};
use gradeflow::rubric::{allocate, run_generation, stratify, GenerationConfig, LookupLabeler, SamplingMethod};
use num::{BigRational, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn simulated(corpus: &Corpus, sigma: f64) -> SimulatedBackend {
    SimulatedBackend::new(Oracle::from_corpus(corpus), 0, sigma)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = rng.random_range(1..=50);
        let full: f64 = [5.0, 15.0, 19.0][rng.random_range(0..3)];
        let human: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=full)).collect();
        let predicted: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=full)).collect();
        let r = reference(&human, &predicted, full);
        let m = evaluate(&ScorePairVector::new(human, predicted, full).map_err(|e| e.to_string())?);
        let pearson_gap = match (m.pearson, r.pearson) {
            (Some(a), Some(b)) => (a - b).abs(),
            (None, None) => 0.0,
            _ => return Err(format!("vector {i}: pearson definedness differs")),
        };
        let gap = (m.mae - r.mae).abs().max((m.rmse - r.rmse).abs()).max((m.nrmse - r.nrmse).abs()).max(pearson_gap);
        worst = worst.max(gap);
        ensure!(gap <= 1e-12, "vector {i}: deviation {gap:e}");
        ensure!(m.rmse >= m.mae, "vector {i}: RMSE {} < MAE {}", m.rmse, m.mae);
    }
    Ok(format!("1000 vectors, max deviation {worst:.1e}"))
}

fn published_nrmse() -> Outcome {
    let a = cell(Some(nrmse_from(8.98, 19.0).map_err(|e| e.to_string())?));
    let b = cell(Some(nrmse_from(5.62, 19.0).map_err(|e| e.to_string())?));
    ensure!(a == "0.47" && b == "0.30", "got {a} and {b}");
    Ok(format!("8.98/19 -> {a}, 5.62/19 -> {b}"))
}

fn sampler_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for set in 0..200 {
        let scores: Vec<ScoredAnswer> =
            (0..40).map(|i| ScoredAnswer::new(format!("a{i:02}"), rng.random_range(0..=15) as f64, Scorer::Llm)).collect();
        let dist = stratify(&scores, 5, 15.0).map_err(|e| e.to_string())?;
        let counts = dist.counts();
        let n = dist.total();
        for m in [5usize, 8, 10] {
            let alloc = allocate(&dist, m).map_err(|e| format!("set {set}, m={m}: {e}"))?;
            for (l, &c) in counts.iter().enumerate() {
                let exact = (BigRational::new(c.into(), n.into()) * BigRational::from_integer(m.into())).ceil();
                let exact = exact.to_integer().to_usize().unwrap();
                ensure!(alloc.ceil[l] == exact, "set {set}, m={m}, stratum {l}: ceil {} != {exact}", alloc.ceil[l]);
                ensure!(alloc.sizes[l] <= c, "set {set}, m={m}, stratum {l}: {} > |B_l| = {c}", alloc.sizes[l]);
            }
            let total: usize = alloc.sizes.iter().sum();
            ensure!(total == m.min(n), "set {set}, m={m}: total {total}");
            checked += 1;
        }
    }
    Ok(format!("{checked} allocations"))
}

fn store_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn pipeline_determinism() -> Outcome {
    let corpus = synthetic();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = |run: &str| RunConfig { store_root: root.path().to_path_buf(), run_id: run.into(), ..Default::default() };
    let recorder = RecordingBackend::new(simulated(&corpus, 1.5));
    run_pipeline(&config("recorded"), &corpus, &recorder, &mut LookupLabeler { corpus: &corpus }, false).map_err(|e| e.to_string())?;
    let entries = recorder.entries();

    let mut stores = Vec::new();
    for run in ["replay-a", "replay-b"] {
        let scripted = ScriptedBackend::new(entries.clone());
        let summary =
            run_pipeline(&config(run), &corpus, &scripted, &mut LookupLabeler { corpus: &corpus }, false).map_err(|e| e.to_string())?;
        ensure!(summary.network_attempts == 0, "offline run opened a socket");
        stores.push(store_bytes(&summary.dir));
    }
    ensure!(stores[0] == stores[1], "replayed run stores differ");
    let bytes: usize = stores[0].iter().map(|(_, b)| b.len()).sum();
    Ok(format!("{} scripted replies, {} files / {bytes} bytes identical", entries.len(), stores[0].len()))
}

fn zero_noise() -> Outcome {
    let corpus = synthetic();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = RunConfig { store_root: root.path().to_path_buf(), ..Default::default() };
    let backend = simulated(&corpus, 0.0);
    let summary = run_pipeline(&config, &corpus, &backend, &mut LookupLabeler { corpus: &corpus }, false).map_err(|e| e.to_string())?;
    let mean = &summary.reports.first().ok_or("no report")?.report.mean;
    ensure!(mean.mae == 0.0 && mean.rmse == 0.0, "MAE {} RMSE {}", mean.mae, mean.rmse);
    ensure!(summary.queue.is_empty(), "{} answers queued", summary.queue.len());
    Ok("MAE = RMSE = 0, empty queue".into())
}

fn review_direction() -> Outcome {
    let corpus = synthetic();
    let full = corpus.questions[0].full_points;
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = RunConfig {
        store_root: root.path().to_path_buf(),
        review: ReviewConfig { group_size: 10, subgroup_count: 2, rounds: Rounds::Regrouped, combine: Combine::Union, ..Default::default() },
        ..Default::default()
    };
    let seeds: Vec<u64> = (0..20).collect();
    let out = exp_review(&config, &corpus, &simulated(&corpus, 0.1 * full), 0.2, &seeds).map_err(|e| e.to_string())?;
    let (s, r) = (out.mean_single, out.mean_regrouped);
    let detail = format!("single {s:.4}, regrouped {r:.4}, all-negative {:.2}", out.all_negative);
    ensure!(r >= s, "regrouped below single-round: {detail}");
    ensure!(s >= 0.8 && r >= 0.8, "below the all-negative baseline: {detail}");
    ensure!(s <= 1.0 && r <= 1.0, "accuracy above 1: {detail}");
    Ok(detail)
}

fn scores_json(ids: &[&str]) -> String {
    let items: Vec<String> = ids.iter().map(|id| format!(r#"{{"answer_id":"{id}","score":7,"feedback":"ok"}}"#)).collect();
    format!("```json\n{{\"scores\":[{}]}}\n```", items.join(","))
}

fn batch_completeness() -> Outcome {
    let corpus = synthetic();
    let q = &corpus.questions[0];
    let rubric = corpus.base_rubric(&q.id).unwrap();
    let answers = corpus.answers_for(&q.id);
    let ids: Vec<&str> = answers.iter().map(|a| a.id.as_str()).collect();
    let options = GradingOptions { parallelism: 1, ..Default::default() };
    for size in [10usize, 20, 30, 40] {
        let sim = simulated(&corpus, 1.0);
        let mut replies = Vec::new();
        for chunk in ids.chunks(size) {
            replies.push(scores_json(&chunk[1..]));
            replies.push(scores_json(chunk));
        }
        let scripted = ScriptedBackend::queued(replies);
        for (name, backend) in [("simulated", &sim as &dyn Backend), ("one-miss", &scripted)] {
            let out = Grader::new(q, rubric, backend, &options).grade_batch(&answers, size, 0, 1).map_err(|e| e.to_string())?;
            let distinct: BTreeSet<&str> = out.records.iter().map(|r| r.answer_id.as_str()).collect();
            ensure!(out.records.len() == 40 && distinct.len() == 40, "size {size}, {name}: {} records", out.records.len());
            ensure!(out.failures.is_empty(), "size {size}, {name}: {} failures", out.failures.len());
        }
        ensure!(scripted.remaining() == 0, "size {size}: re-ask replies left unused");
    }
    Ok("sizes 10/20/30/40, simulated and one-miss re-ask".into())
}

fn chain_integrity() -> Outcome {
    let corpus = synthetic();
    let q = &corpus.questions[0];
    let r0 = corpus.base_rubric(&q.id).unwrap();
    let config = GenerationConfig { method: SamplingMethod::DistributionAware, iterations: 2, sample_size: 5, exclude_used: true, ..Default::default() };
    let backend = simulated(&corpus, 1.0);
    let out = run_generation(q, r0, &corpus, &config, &backend, &GradingOptions::default(), &mut LookupLabeler { corpus: &corpus })
        .map_err(|e| e.to_string())?;
    let versions: Vec<u32> = out.chain.iter().map(|r| r.version).collect();
    ensure!(versions == [0, 1, 2], "versions {versions:?}");
    let labeled: BTreeSet<&str> = out.labels.iter().map(|l| l.answer_id.as_str()).collect();
    ensure!(out.labels.len() == 10 && labeled.len() == 10, "{} labels, {} distinct", out.labels.len(), labeled.len());
    validate_chain(&out.chain).map_err(|e| e.to_string())?;
    Ok(format!("chain {}", out.chain.iter().map(|r| r.id()).collect::<Vec<_>>().join(" <- ")))
}

fn wire_conformance() -> Outcome {
    std::env::set_var("GRADEFLOW_ACCEPTANCE_KEY", "sk-acceptance");
    let backend = |url: &str, retries| {
        OpenAiBackend::new(BackendConfig {
            kind: BackendKind::OpenaiCompatible,
            base_url: Some(url.into()),
            api_key_env: "GRADEFLOW_ACCEPTANCE_KEY".into(),
            retries,
            backoff_ms: 1,
            timeout_secs: 5,
            ..Default::default()
        })
        .unwrap()
    };
    let env = TaskEnvelope::new(Task::Grade, "q1", 0, vec!["a01".into()]);
    let bundle = PromptBundle::new("system", vec!["grade".into()], env, 0.0, 128).unwrap();

    let ok = StubServer::start(vec![(200, completion("hello"))]);
    let text = backend(&ok.url, 2).complete(&bundle).map_err(|e| e.to_string())?.text;
    ensure!(text == "hello", "reply {text}");
    let seen = ok.requests();
    let body: Value = serde_json::from_str(&seen[0].body).map_err(|e| e.to_string())?;
    ensure!(seen[0].request_line.starts_with("POST /v1/chat/completions"), "{}", seen[0].request_line);
    ensure!(body["model"].is_string() && body["messages"].is_array() && body["temperature"].is_number(), "body {body}");
    ensure!(seen[0].header("authorization") == Some("Bearer sk-acceptance"), "auth {:?}", seen[0].header("authorization"));

    let busy = StubServer::start(vec![(503, "{}".into())]);
    let err = backend(&busy.url, 3).complete(&bundle).unwrap_err();
    ensure!(matches!(err, LlmError::Http { status: 503, .. }), "{err}");
    ensure!(busy.requests().len() == 4, "{} requests for retries = 3", busy.requests().len());

    let denied = StubServer::start(vec![(401, "{}".into())]);
    let err = backend(&denied.url, 3).complete(&bundle).unwrap_err();
    ensure!(matches!(err, LlmError::Auth { .. }), "{err}");
    ensure!(denied.requests().len() == 1, "401 retried: {} requests", denied.requests().len());
    Ok("body, bearer auth, 1 + 3 attempts on 503, 1 on 401".into())
}

fn loader_round_trips() -> Outcome {
    let err = |e: gradeflow::corpus::CorpusError| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for name in ["synthetic.json", "os_example.json"] {
        let corpus = load_os_dataset(fixture(name)).map_err(err)?;
        corpus.validate().map_err(err)?;
        let out = dir.path().join(name.trim_end_matches(".json"));
        write_os_dataset(&corpus, &out).map_err(err)?;
        ensure!(load_os_dataset(&out).map_err(err)? == corpus, "{name} changed on round trip");
    }
    let mohler = load_mohler_dataset(fixture("mohler_sample.tsv")).map_err(err)?;
    let path = dir.path().join("mohler.tsv");
    fs::write(&path, write_mohler_dataset(&mohler).map_err(err)?).map_err(|e| e.to_string())?;
    ensure!(load_mohler_dataset(&path).map_err(err)? == mohler, "Mohler fixture changed on round trip");

    let example = load_os_dataset(fixture("os_example.json")).map_err(err)?;
    ensure!(example.individual_scores("os-ex-1") == [13.0, 10.0, 10.0], "OS grader triple missing");
    ensure!(example.human_final("os-ex-1") == Some(11.0), "OS example final {:?}", example.human_final("os-ex-1"));
    ensure!(mohler.individual_scores("1.1-0002") == [5.0, 3.0], "Mohler grader pair missing");
    ensure!(mohler.human_final("1.1-0002") == Some(4.0), "Mohler example final {:?}", mohler.human_final("1.1-0002"));
    Ok("OS and Mohler fixtures stable; (13,10,10) -> 11.0, (5,3) -> 4.0".into())
}

fn main() {
    let criteria: [(u8, &str, Duration, fn() -> Outcome); 10] = [
        (1, "metric oracle equivalence", Duration::from_secs(5), metric_oracle),
        (2, "published NRMSE cross-check", Duration::from_secs(1), published_nrmse),
        (3, "stratified sampler fidelity", Duration::from_secs(5), sampler_fidelity),
        (4, "pipeline determinism", Duration::from_secs(10), pipeline_determinism),
        (5, "zero-noise oracle sanity", Duration::from_secs(10), zero_noise),
        (6, "review direction", Duration::from_secs(60), review_direction),
        (7, "batch completeness", Duration::from_secs(10), batch_completeness),
        (8, "rubric chain integrity", Duration::from_secs(10), chain_integrity),
        (9, "wire conformance", Duration::from_secs(5), wire_conformance),
        (10, "loader round-trips", Duration::from_secs(1), loader_round_trips),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("took {elapsed:.2?}, budget {budget:?} ({detail})")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} {name} [{elapsed:.2?}]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name} [{elapsed:.2?}]: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
