use std::collections::BTreeSet;
use std::io;
use std::path::Path;

use gradeflow::corpus::{
    inject_anomalies, write_mohler_dataset, write_os_dataset, Corpus, CorpusError, DatasetTag, Granularity, InjectionRecord,
    Rubric, ScoredAnswer,
};
use gradeflow::grader;
use gradeflow::llm::{build_backend, Backend, RecordingBackend};
use gradeflow::metrics::{Table, TableFormat};
use gradeflow::pipeline::experiments;
use gradeflow::pipeline::{
    chain_for, evaluate_records, example_pool, grades_for, load_corpus, report_record, review_input, run_pipeline, stage_key,
    Checkpoint, LabelMode, PipelineError, RunConfig,
};
use gradeflow::review::{detection_accuracy, run_review, QueueEntry, ReviewConfig};
use gradeflow::rubric::{self, human_label, sample_random, GenerationConfig, InteractiveLabeler, LabeledPair, Labeler, LookupLabeler};
use gradeflow::seed::derive_seed;
use gradeflow::store::{RunStore, RunWarning};

type Result<T> = std::result::Result<T, PipelineError>;

fn write_io(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Corpus(CorpusError::Io { path: path.to_path_buf(), source })
}

fn open_store(config: &RunConfig) -> Result<RunStore> {
    Ok(RunStore::open(&config.store_root, &config.run_id)?)
}

fn load(config: &RunConfig) -> Result<Corpus> {
    Ok(load_corpus(&config.corpus, config.dataset)?)
}

/// Marks a standalone stage in the run checkpoint so `pipeline --resume`
/// can pick up after it.
fn mark(store: &RunStore, key: &str) -> Result<()> {
    let mut cp = Checkpoint::load(store)?.unwrap_or_default();
    cp.mark(store, key)?;
    Ok(())
}

fn with_labeler<T>(config: &RunConfig, corpus: &Corpus, f: impl FnOnce(&mut dyn Labeler) -> Result<T>) -> Result<T> {
    match config.labels {
        LabelMode::Lookup => f(&mut LookupLabeler { corpus }),
        LabelMode::Interactive => {
            let stdin = io::stdin();
            f(&mut InteractiveLabeler::new(stdin.lock(), io::stdout()))
        }
    }
}

/// Builds the configured backend and runs `f` with it. With `record`, every
/// exchange is also written to a scripted-reply fixture.
pub fn with_backend(
    config: &RunConfig,
    record: Option<&Path>,
    f: impl FnOnce(&RunConfig, &Corpus, &dyn Backend) -> Result<()>,
) -> Result<()> {
    let corpus = load(config)?;
    let backend = build_backend(&config.backend, Some(&corpus))?;
    match record {
        None => f(config, &corpus, backend.as_ref()),
        Some(path) => {
            let recorder = RecordingBackend::new(backend);
            let result = f(config, &corpus, &recorder);
            recorder.write_fixture(path).map_err(write_io(path))?;
            result
        }
    }
}

pub fn ingest(path: &Path, dataset: DatasetTag, out: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(path, dataset)?;
    let mut t = Table::new(["question", "full", "answers", "labeled", "rubrics"]);
    for q in &corpus.questions {
        let answers = corpus.answers_for(&q.id);
        let labeled = answers.iter().filter(|a| corpus.human_final(&a.id).is_some()).count();
        let rubrics: Vec<&str> =
            corpus.rubrics.iter().filter(|r| r.question_id == q.id).map(|r| r.granularity.as_str()).collect();
        t.push([q.id.clone(), q.full_points.to_string(), answers.len().to_string(), labeled.to_string(), rubrics.join(" ")]);
    }
    print!("{}", t.render(TableFormat::Markdown));
    if let Some(out) = out {
        match dataset {
            DatasetTag::Mohler => {
                let text = write_mohler_dataset(&corpus)?;
                std::fs::write(out, text).map_err(write_io(out))?;
            }
            DatasetTag::Os | DatasetTag::Synthetic => {
                write_os_dataset(&corpus, out)?;
            }
        }
        println!("wrote {}", out.display());
    }
    Ok(())
}

pub fn label(config: &RunConfig, ids: &[String], count: usize) -> Result<()> {
    let corpus = load(config)?;
    let store = open_store(config)?;
    for q in config.selected(&corpus)? {
        let rubric = latest_rubric(&store, &corpus, &q.id)?;
        let chosen: Vec<String> = if ids.is_empty() {
            let pool: Vec<String> = corpus.answers_for(&q.id).iter().map(|a| a.id.clone()).collect();
            let mut used: BTreeSet<String> =
                store.load_all::<LabeledPair>()?.into_iter().filter(|l| l.question_id == q.id).map(|l| l.answer_id).collect();
            sample_random(&pool, count, derive_seed(config.seed, "label", &q.id), 0, &mut used)?.answer_ids
        } else {
            ids.iter().filter(|id| corpus.answer(id).is_some_and(|a| a.question_id == q.id)).cloned().collect()
        };
        let pairs = with_labeler(config, &corpus, |l| Ok(human_label(&corpus, q, &rubric, &chosen, 0, l)?))?;
        store.append_all(&pairs)?;
        println!("{}: labeled {} answers", q.id, pairs.len());
    }
    Ok(())
}

fn latest_rubric(store: &RunStore, corpus: &Corpus, question_id: &str) -> Result<Rubric> {
    if let Some(r) = chain_for(store, question_id)?.pop() {
        return Ok(r);
    }
    corpus
        .base_rubric(question_id)
        .cloned()
        .ok_or_else(|| PipelineError::Config(format!("question `{question_id}` has no rubric")))
}

pub fn rubric_gen(config: &RunConfig, corpus: &Corpus, backend: &dyn Backend) -> Result<()> {
    config.validate(corpus)?;
    let store = open_store(config)?;
    for q in config.selected(corpus)? {
        let r0 = corpus.base_rubric(&q.id).expect("validated");
        let generation = GenerationConfig { seed: derive_seed(config.seed, "rubric", &q.id), ..config.generation.clone() };
        let out = with_labeler(config, corpus, |l| {
            Ok(rubric::run_generation(q, r0, corpus, &generation, backend, &config.grading_options(), l)?)
        })?;
        store.append_all(&out.chain)?;
        store.append_all(&out.labels)?;
        store.append_all(&out.failures)?;
        store.append_all(&out.warnings)?;
        mark(&store, &stage_key(&q.id, "rubric"))?;
        let last = out.chain.last().expect("chain has r0");
        println!("## {} (version {}, {} labels)\n\n{}\n", last.id(), last.version, out.labels.len(), last.body.trim_end());
    }
    Ok(())
}

pub fn grade(config: &RunConfig, corpus: &Corpus, backend: &dyn Backend, granularity: Option<Granularity>) -> Result<()> {
    config.validate(corpus)?;
    let store = open_store(config)?;
    for q in config.selected(corpus)? {
        let rubric = match granularity {
            Some(g) => corpus
                .rubric(&q.id, g)
                .cloned()
                .ok_or_else(|| PipelineError::Config(format!("question `{}` has no {} rubric", q.id, g.as_str())))?,
            None => latest_rubric(&store, corpus, &q.id)?,
        };
        let labels = store.load_all::<LabeledPair>()?;
        let examples = example_pool(corpus, &q.id, &labels);
        let seed = derive_seed(config.seed, "grade", &q.id);
        let strategy = config.strategy_for(&q.id);
        let out = grader::run_grading(corpus, q, &rubric, &strategy, config.repetitions, backend, seed, &config.grading_options(), &examples)?;
        store.append_all(&out.records)?;
        store.append_all(&out.failures)?;
        if !out.failures.is_empty() {
            eprintln!("{}: {} answers could not be graded", q.id, out.failures.len());
        }
        let report = evaluate_records(corpus, &q.id, &out.records, &format!("{}/{}", q.id, strategy.kind.as_str()))?;
        let rec = report_record(&q.id, strategy.kind.as_str(), report, config.table_format);
        print!("{}", rec.table);
        store.append(&rec)?;
        mark(&store, &stage_key(&q.id, "grade"))?;
    }
    Ok(())
}

/// Injected pairs for a question if any were recorded, otherwise the
/// repetition-0 grades.
fn review_pairs(store: &RunStore, corpus: &Corpus, question_id: &str) -> Result<Vec<ScoredAnswer>> {
    let injected: Vec<ScoredAnswer> = store
        .load_all::<ScoredAnswer>()?
        .into_iter()
        .filter(|s| corpus.answer(&s.answer_id).is_some_and(|a| a.question_id == question_id))
        .collect();
    if !injected.is_empty() {
        return Ok(injected);
    }
    Ok(review_input(&grades_for(store, question_id)?))
}

pub fn review(config: &RunConfig, corpus: &Corpus, backend: &dyn Backend) -> Result<()> {
    config.validate(corpus)?;
    let store = open_store(config)?;
    for q in config.selected(corpus)? {
        let rubric = latest_rubric(&store, corpus, &q.id)?;
        let pairs = review_pairs(&store, corpus, &q.id)?;
        if pairs.is_empty() {
            return Err(PipelineError::Config(format!("no grades for `{}` in run `{}`; grade first", q.id, config.run_id)));
        }
        let cfg = ReviewConfig {
            seed: derive_seed(config.seed, "review", &q.id),
            parallelism: config.backend.parallelism,
            ..config.review.clone()
        };
        let out = run_review(q, &rubric, corpus, &pairs, &cfg, backend)?;
        store.append_all(&out.findings)?;
        store.append_all(&out.queue_entries(&q.id))?;
        store.append_all(&out.warnings)?;
        mark(&store, &stage_key(&q.id, "review"))?;
        println!("{}: {} groups, {} flagged, {} unreviewed", q.id, out.groups.len(), out.queue.len(), out.unreviewed.len());
        for id in &out.queue {
            println!("{id}");
        }
    }
    Ok(())
}

pub fn inject(config: &RunConfig, fraction: f64, seed: Option<u64>) -> Result<()> {
    let corpus = load(config)?;
    let store = open_store(config)?;
    let seed = seed.unwrap_or(config.seed);
    for q in config.selected(&corpus)? {
        let d = review_input(&grades_for(&store, &q.id)?);
        if d.is_empty() {
            return Err(PipelineError::Config(format!("no grades for `{}` in run `{}`; grade first", q.id, config.run_id)));
        }
        let (perturbed, truth) = inject_anomalies(&d, q.full_points, fraction, seed)?;
        store.append_all(&perturbed)?;
        store.append_all(&truth)?;
        println!("{}: perturbed {} of {} scores", q.id, truth.len(), perturbed.len());
    }
    Ok(())
}

pub fn eval(config: &RunConfig) -> Result<()> {
    let corpus = load(config)?;
    let store = open_store(config)?;
    let injections = store.load_all::<InjectionRecord>()?;
    let queue = store.load_all::<QueueEntry>()?;
    let mut any = false;
    for q in config.selected(&corpus)? {
        let records: Vec<_> = grades_for(&store, &q.id)?.into_iter().filter(|r| !r.regrade).collect();
        if records.is_empty() {
            continue;
        }
        any = true;
        let report = evaluate_records(&corpus, &q.id, &records, &format!("{}/eval", q.id))?;
        let rec = report_record(&q.id, "eval", report, config.table_format);
        println!("{}", q.id);
        print!("{}", rec.table);
        store.append(&rec)?;

        let truth: Vec<InjectionRecord> =
            injections.iter().filter(|i| corpus.answer(&i.answer_id).is_some_and(|a| a.question_id == q.id)).cloned().collect();
        if !truth.is_empty() {
            let flagged: Vec<String> = queue.iter().filter(|e| e.question_id == q.id).map(|e| e.answer_id.clone()).collect();
            let total = review_input(&records).len();
            println!("detection accuracy: {:.2}", detection_accuracy(&flagged, &truth, total));
        }
    }
    if !any {
        return Err(PipelineError::Config(format!("run `{}` has no grades to evaluate", config.run_id)));
    }
    Ok(())
}

pub fn pipeline(config: &RunConfig, corpus: &Corpus, backend: &dyn Backend, resume: bool) -> Result<()> {
    let summary = with_labeler(config, corpus, |l| run_pipeline(config, corpus, backend, l, resume))?;
    for key in &summary.skipped {
        log::info!("skipped {key}");
    }
    for r in &summary.reports {
        println!("{} ({})", r.question_id, r.label);
        print!("{}", r.table);
    }
    println!("review queue: {} answers", summary.queue.len());
    for e in &summary.queue {
        println!("{} {}", e.question_id, e.answer_id);
    }
    println!("run store: {}", summary.dir.display());
    Ok(())
}

fn save_table(store: &RunStore, name: &str, format: TableFormat, table: &str) -> Result<()> {
    let ext = match format {
        TableFormat::Markdown => "md",
        TableFormat::Csv => "csv",
    };
    let path = store.dir().join(format!("{name}.{ext}"));
    std::fs::write(&path, table).map_err(write_io(&path))
}

fn finish_comparison(config: &RunConfig, name: &str, out: experiments::Comparison) -> Result<()> {
    let store = open_store(config)?;
    let table = out.table(config.table_format);
    print!("{table}");
    store.append_all::<RunWarning>(&out.warnings)?;
    save_table(&store, name, config.table_format, &table)
}

pub fn exp_rubrics(config: &RunConfig, corpus: &Corpus, backend: &dyn Backend) -> Result<()> {
    let out = with_labeler(config, corpus, |l| experiments::exp_rubrics(config, corpus, backend, l))?;
    finish_comparison(config, "exp-rubrics", out)
}

pub fn exp_strategies(config: &RunConfig, corpus: &Corpus, backend: &dyn Backend) -> Result<()> {
    let out = experiments::exp_strategies(config, corpus, backend)?;
    finish_comparison(config, "exp-strategies", out)
}

pub fn exp_review(config: &RunConfig, corpus: &Corpus, backend: &dyn Backend, fraction: f64, seeds: &[u64]) -> Result<()> {
    let out = experiments::exp_review(config, corpus, backend, fraction, seeds)?;
    let table = out.table(config.table_format);
    print!("{table}");
    save_table(&open_store(config)?, "exp-review", config.table_format, &table)
}
