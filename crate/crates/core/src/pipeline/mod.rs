//! End-to-end runs: rubric generation, grading, review and reporting for
//! every selected question, persisted to a run store with a checkpoint
//! after each stage.

mod checkpoint;
mod eval;
pub mod experiments;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FILE};
pub use eval::{evaluate_records, report_record, score_pairs, to_scored, ReportRecord};

use crate::corpus::{load_mohler_dataset, load_os_dataset, Corpus, CorpusError, DatasetTag, Question, Rubric, ScoredAnswer};
use crate::grader::{self, Example, GradeError, GradeFailure, GradeRecord, GradingOptions, GradingStrategy};
use crate::llm::{Backend, BackendConfig, LlmError};
use crate::metrics::{MetricsError, TableFormat};
use crate::review::{QueueEntry, ReviewConfig, ReviewError};
use crate::rubric::{self, GenerationConfig, LabeledPair, Labeler, RubricError};
use crate::seed::derive_seed;
use crate::store::{RunStore, RunWarning, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Grade(#[from] GradeError),
    #[error(transparent)]
    Rubric(#[from] RubricError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Process exit codes used by the command line front end.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const BACKEND: i32 = 3;
    pub const DATA: i32 = 4;
}

fn llm_code(e: &LlmError) -> i32 {
    match e {
        LlmError::Config(_) => exit::CONFIG,
        LlmError::Script(_) | LlmError::Simulation(_) | LlmError::Response(_) => exit::DATA,
        _ => exit::BACKEND,
    }
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => exit::CONFIG,
            PipelineError::Llm(e) => llm_code(e),
            PipelineError::Grade(GradeError::Llm(e))
            | PipelineError::Rubric(RubricError::Llm(e))
            | PipelineError::Rubric(RubricError::Grade(GradeError::Llm(e)))
            | PipelineError::Review(ReviewError::Llm(e)) => llm_code(e),
            PipelineError::Grade(GradeError::Invalid(_) | GradeError::ContextBudget { .. })
            | PipelineError::Rubric(RubricError::Config(_))
            | PipelineError::Review(ReviewError::Config(_)) => exit::CONFIG,
            _ => exit::DATA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Lookup,
    Interactive,
}

impl std::str::FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lookup" => Ok(LabelMode::Lookup),
            "interactive" => Ok(LabelMode::Interactive),
            other => Err(format!("unknown label mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub dataset: DatasetTag,
    /// Questions to run; empty means every question in the corpus.
    pub questions: Vec<String>,
    pub backend: BackendConfig,
    pub generation: GenerationConfig,
    pub strategy: GradingStrategy,
    /// Per-question batch size overrides.
    pub batch_sizes: BTreeMap<String, usize>,
    pub grading: GradingOptions,
    pub review: ReviewConfig,
    pub repetitions: u32,
    pub run_id: String,
    pub seed: u64,
    pub store_root: PathBuf,
    pub labels: LabelMode,
    pub regrade: bool,
    pub table_format: TableFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::new(),
            dataset: DatasetTag::Os,
            questions: Vec::new(),
            backend: BackendConfig::default(),
            generation: GenerationConfig::default(),
            strategy: GradingStrategy::default(),
            batch_sizes: BTreeMap::new(),
            grading: GradingOptions::default(),
            review: ReviewConfig::default(),
            repetitions: 3,
            run_id: "run".into(),
            seed: 0,
            store_root: PathBuf::from("runs"),
            labels: LabelMode::Lookup,
            regrade: false,
            table_format: TableFormat::Markdown,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// Questions selected by the config, in corpus order.
    pub fn selected<'a>(&self, corpus: &'a Corpus) -> Result<Vec<&'a Question>, PipelineError> {
        if self.questions.is_empty() {
            return Ok(corpus.questions.iter().collect());
        }
        self.questions
            .iter()
            .map(|id| corpus.question(id).ok_or_else(|| PipelineError::Config(format!("unknown question `{id}`"))))
            .collect()
    }

    /// Checks every sub-config against the corpus. Runs before any
    /// request is sent.
    pub fn validate(&self, corpus: &Corpus) -> Result<(), PipelineError> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(PipelineError::Config(format!("invalid run id `{}`", self.run_id)));
        }
        if self.repetitions == 0 {
            return Err(PipelineError::Config("repetitions must be at least 1".into()));
        }
        self.backend.validate()?;
        self.strategy.validate()?;
        self.review.validate()?;
        for q in self.selected(corpus)? {
            let n = corpus.answers_for(&q.id).len();
            self.generation.validate(n)?;
            if corpus.base_rubric(&q.id).is_none() {
                return Err(PipelineError::Config(format!("question `{}` has no human rubric", q.id)));
            }
        }
        Ok(())
    }

    /// The grading strategy with any per-question batch size applied.
    pub fn strategy_for(&self, question_id: &str) -> GradingStrategy {
        let mut s = self.strategy.clone();
        if let Some(&b) = self.batch_sizes.get(question_id) {
            s.batch_size = b;
        }
        s
    }

    pub fn grading_options(&self) -> GradingOptions {
        GradingOptions { parallelism: self.backend.parallelism, ..self.grading.clone() }
    }
}

pub fn load_corpus(path: impl AsRef<Path>, dataset: DatasetTag) -> Result<Corpus, CorpusError> {
    match dataset {
        DatasetTag::Mohler => load_mohler_dataset(path),
        DatasetTag::Os | DatasetTag::Synthetic => load_os_dataset(path),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub reports: Vec<ReportRecord>,
    pub queue: Vec<QueueEntry>,
    pub network_attempts: u64,
}

pub fn stage_key(question_id: &str, stage: &str) -> String {
    format!("{question_id}:{stage}")
}

/// Rubric chain for a question as stored, by version.
pub fn chain_for(store: &RunStore, question_id: &str) -> Result<Vec<Rubric>, PipelineError> {
    let mut chain: Vec<Rubric> = store.load_all::<Rubric>()?.into_iter().filter(|r| r.question_id == question_id).collect();
    chain.sort_by_key(|r| r.version);
    Ok(chain)
}

pub fn grades_for(store: &RunStore, question_id: &str) -> Result<Vec<GradeRecord>, PipelineError> {
    Ok(store.load_all::<GradeRecord>()?.into_iter().filter(|r| r.question_id == question_id).collect())
}

/// Review input: the repetition-0 grades.
pub fn review_input(records: &[GradeRecord]) -> Vec<ScoredAnswer> {
    records.iter().filter(|r| r.repetition == 0 && !r.regrade).map(to_scored).collect()
}

/// Labeled answers as one-shot examples; falls back to `human_final`.
pub fn example_pool(corpus: &Corpus, question_id: &str, labels: &[LabeledPair]) -> Vec<Example> {
    let own: Vec<Example> = labels.iter().filter(|l| l.question_id == question_id).map(LabeledPair::to_example).collect();
    if !own.is_empty() {
        return own;
    }
    corpus
        .human_final_pairs(question_id)
        .into_iter()
        .filter_map(|p| {
            corpus.answer(&p.answer_id).map(|a| Example { answer_id: a.id.clone(), text: a.text.clone(), score: p.score, rationale: None })
        })
        .collect()
}

/// Runs every stage for every selected question. With `resume`, stages
/// recorded in the checkpoint are skipped and anything written after it
/// is discarded first.
pub fn run_pipeline(
    config: &RunConfig,
    corpus: &Corpus,
    backend: &dyn Backend,
    labeler: &mut dyn Labeler,
    resume: bool,
) -> Result<RunSummary, PipelineError> {
    config.validate(corpus)?;
    let store = RunStore::open(&config.store_root, &config.run_id)?;
    let mut checkpoint = match Checkpoint::load(&store)? {
        Some(cp) if resume => {
            store.truncate_to(&cp.lengths)?;
            cp
        }
        None if resume => {
            store.truncate_to(&Default::default())?;
            Checkpoint::default()
        }
        existing => {
            let used = existing.is_some() || store.lengths()?.values().any(|&l| l > 0);
            if used {
                return Err(PipelineError::Config(format!(
                    "run `{}` already exists in {}; resume it or pick another run id",
                    config.run_id,
                    config.store_root.display()
                )));
            }
            Checkpoint::default()
        }
    };

    let options = config.grading_options();
    let mut summary = RunSummary { dir: store.dir().to_path_buf(), ..Default::default() };
    let mut run_stage = |key: String, checkpoint: &mut Checkpoint, f: &mut dyn FnMut() -> Result<(), PipelineError>| {
        if checkpoint.is_done(&key) {
            log::info!("stage {key} already complete, skipping");
            summary.skipped.push(key);
            return Ok::<(), PipelineError>(());
        }
        log::info!("stage {key}");
        f()?;
        checkpoint.mark(&store, &key)?;
        summary.executed.push(key);
        Ok(())
    };

    for q in config.selected(corpus)? {
        let qid = q.id.as_str();
        let r0 = corpus.base_rubric(qid).expect("validated");

        run_stage(stage_key(qid, "rubric"), &mut checkpoint, &mut || {
            let generation = GenerationConfig { seed: derive_seed(config.seed, "rubric", qid), ..config.generation.clone() };
            let out = rubric::run_generation(q, r0, corpus, &generation, backend, &options, labeler)?;
            store.append_all(&out.chain)?;
            store.append_all(&out.labels)?;
            store.append_all(&out.failures)?;
            store.append_all(&out.warnings)?;
            Ok(())
        })?;

        run_stage(stage_key(qid, "grade"), &mut checkpoint, &mut || {
            let chain = chain_for(&store, qid)?;
            let rubric = chain.last().ok_or_else(|| PipelineError::Config(format!("no rubric chain for `{qid}`")))?;
            let labels = store.load_all::<LabeledPair>()?;
            let examples = example_pool(corpus, qid, &labels);
            let seed = derive_seed(config.seed, "grade", qid);
            let out = grader::run_grading(corpus, q, rubric, &config.strategy_for(qid), config.repetitions, backend, seed, &options, &examples)?;
            store.append_all(&out.records)?;
            store.append_all(&out.failures)?;
            Ok(())
        })?;

        run_stage(stage_key(qid, "review"), &mut checkpoint, &mut || {
            let chain = chain_for(&store, qid)?;
            let rubric = chain.last().expect("grade stage ran");
            let d = review_input(&grades_for(&store, qid)?);
            let review = ReviewConfig {
                seed: derive_seed(config.seed, "review", qid),
                parallelism: config.backend.parallelism,
                ..config.review.clone()
            };
            let out = crate::review::run_review(q, rubric, corpus, &d, &review, backend)?;
            store.append_all(&out.findings)?;
            store.append_all(&out.queue_entries(qid))?;
            store.append_all(&out.warnings)?;
            Ok(())
        })?;

        if config.regrade {
            run_stage(stage_key(qid, "regrade"), &mut checkpoint, &mut || {
                let chain = chain_for(&store, qid)?;
                let rubric = chain.last().expect("grade stage ran");
                let queued: Vec<String> =
                    store.load_all::<QueueEntry>()?.into_iter().filter(|e| e.question_id == qid).map(|e| e.answer_id).collect();
                let answers: Vec<_> = queued.iter().filter_map(|id| corpus.answer(id)).collect();
                if answers.is_empty() {
                    return Ok(());
                }
                let labels = store.load_all::<LabeledPair>()?;
                let examples = example_pool(corpus, qid, &labels);
                let example = grader::select_example(&examples, config.strategy.example_selector);
                let g = grader::Grader::new(q, rubric, backend, &options);
                let pass = derive_seed(config.seed, "regrade", qid);
                let mut out = g.grade_pass(&answers, &config.strategy_for(qid), example, 0, pass)?;
                for r in &mut out.records {
                    r.regrade = true;
                }
                store.append_all(&out.records)?;
                store.append_all::<GradeFailure>(&out.failures)?;
                Ok(())
            })?;
        }

        run_stage(stage_key(qid, "report"), &mut checkpoint, &mut || {
            let all = grades_for(&store, qid)?;
            let first: Vec<GradeRecord> = all.iter().filter(|r| !r.regrade).cloned().collect();
            let report = evaluate_records(corpus, qid, &first, &format!("{qid}/{}", config.strategy.kind.as_str()))?;
            let mut records = vec![report_record(qid, "grading", report, config.table_format)];
            let regraded: Vec<&GradeRecord> = all.iter().filter(|r| r.regrade).collect();
            if !regraded.is_empty() {
                let merged: Vec<GradeRecord> = first
                    .iter()
                    .filter(|r| r.repetition == 0)
                    .map(|r| regraded.iter().find(|g| g.answer_id == r.answer_id).map_or_else(|| r.clone(), |g| (*g).clone()))
                    .collect();
                let report = evaluate_records(corpus, qid, &merged, &format!("{qid}/regraded"))?;
                records.push(report_record(qid, "regraded", report, config.table_format));
            }
            store.append_all(&records)?;
            Ok(())
        })?;
    }

    summary.reports = store.load_all::<ReportRecord>()?;
    summary.queue = store.load_all::<QueueEntry>()?;
    summary.network_attempts = backend.network_attempts();
    Ok(summary)
}

/// Warnings recorded in a run store.
pub fn run_warnings(store: &RunStore) -> Result<Vec<RunWarning>, PipelineError> {
    Ok(store.load_all::<RunWarning>()?)
}
