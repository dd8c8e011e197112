//! `gradeflow`: rubric generation, grading and review from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gradeflow::corpus::{DatasetTag, Granularity};
use gradeflow::grader::StrategyKind;
use gradeflow::llm::BackendKind;
use gradeflow::metrics::TableFormat;
use gradeflow::pipeline::{LabelMode, PipelineError, RunConfig};
use gradeflow::review::{Combine, Rounds};
use gradeflow::rubric::SamplingMethod;

#[derive(Debug, Parser)]
#[command(name = "gradeflow", version, about = "Grade short answers with an LLM, a rubric and a review pass")]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate a corpus, optionally writing it back out normalized.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "os")]
        dataset: DatasetTag,
        /// Output directory (OS layout) or file (Mohler layout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect human labels for a sample of answers.
    Label {
        #[command(flatten)]
        common: Common,
        /// Answer ids to label; defaults to a random sample.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long, default_value_t = 5)]
        count: usize,
    },
    /// Generate a refined rubric chain for each selected question.
    RubricGen {
        #[command(flatten)]
        common: Common,
    },
    /// Grade every answer with the latest rubric in the run store.
    Grade {
        #[command(flatten)]
        common: Common,
        /// Grade with a human rubric from the corpus instead.
        #[arg(long)]
        granularity: Option<Granularity>,
    },
    /// Review graded (or injected) scores and build the regrade queue.
    Review {
        #[command(flatten)]
        common: Common,
    },
    /// Perturb a fraction of the repetition-0 grades for review experiments.
    Inject {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.2)]
        fraction: f64,
        /// Injection seed; defaults to the master seed.
        #[arg(long)]
        injection_seed: Option<u64>,
    },
    /// Evaluate the grades of a run against the human scores.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "human-final")]
        against: Against,
    },
    /// Run rubric generation, grading and review end to end.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Skip stages already recorded in the checkpoint.
        #[arg(long)]
        resume: bool,
        /// Re-grade the review queue and report again.
        #[arg(long)]
        regrade: bool,
    },
    /// Compare rubric granularities.
    ExpRubrics {
        #[command(flatten)]
        common: Common,
    },
    /// Compare prompt strategies.
    ExpStrategies {
        #[command(flatten)]
        common: Common,
    },
    /// Measure review detection accuracy with and without regrouping.
    ExpReview {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.2)]
        fraction: f64,
        /// Seeds as a list (`0,1,2`) or half-open range (`0..20`).
        #[arg(long, default_value = "0..10")]
        seeds: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Against {
    HumanFinal,
}

/// Options shared by every command that works on a run. Flags override
/// the config file.
#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetTag>,
    /// Restrict to these questions (repeatable).
    #[arg(long = "question")]
    questions: Vec<String>,
    #[arg(long)]
    run: Option<String>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Reply fixture for the scripted backend.
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    /// Simulated grading noise in points.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    repetitions: Option<u32>,
    #[arg(long)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    reflection_rounds: Option<u32>,
    #[arg(long)]
    method: Option<SamplingMethod>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long)]
    strata: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    subgroups: Option<usize>,
    #[arg(long)]
    rounds: Option<Rounds>,
    #[arg(long)]
    combine: Option<Combine>,
    #[arg(long)]
    labels: Option<LabelMode>,
    #[arg(long)]
    format: Option<TableFormat>,
    /// Record every exchange to this fixture for later scripted replay.
    #[arg(long)]
    record: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set! {
            corpus => corpus,
            dataset => dataset,
            run => run_id,
            store => store_root,
            seed => seed,
            backend => backend.kind,
            model => backend.model,
            api_key_env => backend.api_key_env,
            sigma => backend.noise_sigma,
            parallelism => backend.parallelism,
            repetitions => repetitions,
            strategy => strategy.kind,
            batch_size => strategy.batch_size,
            reflection_rounds => strategy.reflection_rounds,
            method => generation.method,
            sample_size => generation.sample_size,
            iterations => generation.iterations,
            strata => generation.strata_count,
            group_size => review.group_size,
            subgroups => review.subgroup_count,
            rounds => review.rounds,
            combine => review.combine,
            labels => labels,
            format => table_format,
        }
        if self.fixture.is_some() {
            c.backend.fixture = self.fixture.clone();
        }
        if self.base_url.is_some() {
            c.backend.base_url = self.base_url.clone();
        }
        if !self.questions.is_empty() {
            c.questions = self.questions.clone();
        }
        if c.corpus.as_os_str().is_empty() {
            return Err(PipelineError::Config("no corpus given (use --corpus or the config file)".into()));
        }
        if c.labels == LabelMode::Interactive {
            c.backend.parallelism = 1;
        }
        Ok(c)
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, PipelineError> {
    let bad = || PipelineError::Config(format!("cannot parse seeds `{text}`"));
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Ingest { corpus, dataset, out } => commands::ingest(&corpus, dataset, out.as_deref()),
        Command::Label { common, ids, count } => commands::label(&common.resolve()?, &ids, count),
        Command::RubricGen { common } => commands::with_backend(&common.resolve()?, common.record.as_deref(), commands::rubric_gen),
        Command::Grade { common, granularity } => {
            commands::with_backend(&common.resolve()?, common.record.as_deref(), |c, corpus, b| commands::grade(c, corpus, b, granularity))
        }
        Command::Review { common } => commands::with_backend(&common.resolve()?, common.record.as_deref(), commands::review),
        Command::Inject { common, fraction, injection_seed } => commands::inject(&common.resolve()?, fraction, injection_seed),
        Command::Eval { common, against: Against::HumanFinal } => commands::eval(&common.resolve()?),
        Command::Pipeline { common, resume, regrade } => {
            let mut config = common.resolve()?;
            config.regrade |= regrade;
            commands::with_backend(&config, common.record.as_deref(), |c, corpus, b| commands::pipeline(c, corpus, b, resume))
        }
        Command::ExpRubrics { common } => commands::with_backend(&common.resolve()?, common.record.as_deref(), commands::exp_rubrics),
        Command::ExpStrategies { common } => {
            commands::with_backend(&common.resolve()?, common.record.as_deref(), commands::exp_strategies)
        }
        Command::ExpReview { common, fraction, seeds } => {
            let seeds = parse_seeds(&seeds)?;
            commands::with_backend(&common.resolve()?, common.record.as_deref(), |c, corpus, b| {
                commands::exp_review(c, corpus, b, fraction, &seeds)
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
