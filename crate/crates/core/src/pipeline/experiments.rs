//! Comparison drivers: rubric granularity, prompt strategy, and review
//! detection accuracy.

use serde::{Deserialize, Serialize};

use super::{evaluate_records, example_pool, review_input, PipelineError, RunConfig};
use crate::corpus::{inject_anomalies, Corpus, Granularity, Question, Rubric};
use crate::grader::{self, GradingStrategy, StrategyKind};
use crate::llm::Backend;
use crate::metrics::{cell, ExperimentReport, Table, TableFormat};
use crate::review::{detection_accuracy, run_review, ReviewConfig, Rounds};
use crate::rubric::{self, GenerationConfig, Labeler, SamplingMethod};
use crate::seed::derive_seed;
use crate::store::RunWarning;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub question_id: String,
    pub label: String,
    pub report: ExperimentReport<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub warnings: Vec<RunWarning>,
}

impl Comparison {
    pub fn table(&self, format: TableFormat) -> String {
        let mut t = Table::new(["question", "setting", "reps", "MAE", "RMSE", "NRMSE", "Pearson"]);
        for r in &self.rows {
            let m = &r.report.mean;
            t.push([
                r.question_id.clone(),
                r.label.clone(),
                r.report.repetitions.to_string(),
                cell(Some(m.mae)),
                cell(Some(m.rmse)),
                cell(Some(m.nrmse)),
                cell(m.pearson),
            ]);
        }
        t.render(format)
    }
}

fn grade_and_report(
    config: &RunConfig,
    corpus: &Corpus,
    q: &Question,
    rubric: &Rubric,
    strategy: &GradingStrategy,
    backend: &dyn Backend,
    label: &str,
) -> Result<ComparisonRow, PipelineError> {
    let examples = example_pool(corpus, &q.id, &[]);
    let seed = derive_seed(config.seed, "grade", &q.id);
    let out = grader::run_grading(corpus, q, rubric, strategy, config.repetitions, backend, seed, &config.grading_options(), &examples)?;
    let report = evaluate_records(corpus, &q.id, &out.records, &format!("{}/{label}", q.id))?;
    Ok(ComparisonRow { question_id: q.id.clone(), label: label.to_string(), report })
}

/// Grades each question under every rubric granularity available. A
/// corpus without a fine human rubric gets a single generated row, built
/// with distribution-aware sampling.
pub fn exp_rubrics(
    config: &RunConfig,
    corpus: &Corpus,
    backend: &dyn Backend,
    labeler: &mut dyn Labeler,
) -> Result<Comparison, PipelineError> {
    config.validate(corpus)?;
    let mut out = Comparison::default();
    for q in config.selected(corpus)? {
        let base = corpus.base_rubric(&q.id).expect("validated").clone();
        let has_fine = corpus.rubric(&q.id, Granularity::FineHuman).is_some();
        for g in Granularity::ALL {
            let rubric = match g {
                Granularity::CoarseHuman | Granularity::FineHuman => match corpus.rubric(&q.id, g) {
                    Some(r) => r.clone(),
                    None => {
                        let msg = format!("question {} has no {} rubric; row skipped", q.id, g.as_str());
                        log::warn!("{msg}");
                        out.warnings.push(RunWarning::new("exp-rubrics", msg));
                        continue;
                    }
                },
                Granularity::GeneratedRandom if !has_fine => continue,
                Granularity::GeneratedRandom | Granularity::GeneratedDistribution => {
                    let method =
                        if g == Granularity::GeneratedRandom { SamplingMethod::Random } else { SamplingMethod::DistributionAware };
                    let generation = GenerationConfig {
                        method,
                        seed: derive_seed(config.seed, "rubric", &q.id),
                        ..config.generation.clone()
                    };
                    let gen = rubric::run_generation(q, &base, corpus, &generation, backend, &config.grading_options(), labeler)?;
                    out.warnings.extend(gen.warnings);
                    gen.chain.last().expect("chain has r0").clone()
                }
            };
            out.rows.push(grade_and_report(config, corpus, q, &rubric, &config.strategy_for(&q.id), backend, g.as_str())?);
        }
    }
    Ok(out)
}

/// Grades each question with every prompt strategy under its base rubric.
pub fn exp_strategies(config: &RunConfig, corpus: &Corpus, backend: &dyn Backend) -> Result<Comparison, PipelineError> {
    config.validate(corpus)?;
    let mut out = Comparison::default();
    for q in config.selected(corpus)? {
        let rubric = corpus.base_rubric(&q.id).expect("validated");
        let batch_size = config.strategy_for(&q.id).batch_size;
        for kind in StrategyKind::ALL {
            let strategy = GradingStrategy { kind, ..config.strategy_for(&q.id) };
            let label = match kind {
                StrategyKind::Batching => format!("batching(size={batch_size})"),
                other => other.as_str().to_string(),
            };
            out.rows.push(grade_and_report(config, corpus, q, rubric, &strategy, backend, &label)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRow {
    pub question_id: String,
    pub seed: u64,
    pub total: usize,
    pub injected: usize,
    pub single: f64,
    pub regrouped: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReviewExperiment {
    pub rows: Vec<ReviewRow>,
    pub mean_single: f64,
    pub mean_regrouped: f64,
    /// Accuracy of flagging nothing.
    pub all_negative: f64,
}

impl ReviewExperiment {
    pub fn table(&self, format: TableFormat) -> String {
        let mut t = Table::new(["question", "seed", "injected", "single", "regrouped"]);
        for r in &self.rows {
            t.push([r.question_id.clone(), r.seed.to_string(), format!("{}/{}", r.injected, r.total), cell(Some(r.single)), cell(Some(r.regrouped))]);
        }
        t.push(["mean".to_string(), String::new(), String::new(), cell(Some(self.mean_single)), cell(Some(self.mean_regrouped))]);
        t.push(["all-negative".to_string(), String::new(), String::new(), cell(Some(self.all_negative)), cell(Some(self.all_negative))]);
        t.render(format)
    }
}

/// For each seed: perturb a fraction of the repetition-0 grades, review
/// them with one round and with regrouping, and score both against the
/// injected ground truth.
pub fn exp_review(
    config: &RunConfig,
    corpus: &Corpus,
    backend: &dyn Backend,
    fraction: f64,
    seeds: &[u64],
) -> Result<ReviewExperiment, PipelineError> {
    config.validate(corpus)?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PipelineError::Config(format!("injection fraction {fraction} outside (0, 1)")));
    }
    if seeds.is_empty() {
        return Err(PipelineError::Config("at least one seed is required".into()));
    }
    let mut out = ReviewExperiment::default();
    let mut negatives = Vec::new();
    for q in config.selected(corpus)? {
        let rubric = corpus.base_rubric(&q.id).expect("validated");
        let seed = derive_seed(config.seed, "grade", &q.id);
        let examples = example_pool(corpus, &q.id, &[]);
        let graded = grader::run_grading(corpus, q, rubric, &config.strategy_for(&q.id), 1, backend, seed, &config.grading_options(), &examples)?;
        let d = review_input(&graded.records);
        for &s in seeds {
            let (perturbed, truth) = inject_anomalies(&d, q.full_points, fraction, s)?;
            let accuracy = |rounds| -> Result<f64, PipelineError> {
                let cfg = ReviewConfig { rounds, seed: s, parallelism: config.backend.parallelism, ..config.review.clone() };
                let found = run_review(q, rubric, corpus, &perturbed, &cfg, backend)?;
                Ok(detection_accuracy(&found.queue, &truth, perturbed.len()))
            };
            let single = accuracy(Rounds::Single)?;
            let regrouped = accuracy(Rounds::Regrouped)?;
            negatives.push(1.0 - truth.len() as f64 / perturbed.len() as f64);
            out.rows.push(ReviewRow { question_id: q.id.clone(), seed: s, total: perturbed.len(), injected: truth.len(), single, regrouped });
        }
    }
    let n = out.rows.len() as f64;
    out.mean_single = out.rows.iter().map(|r| r.single).sum::<f64>() / n;
    out.mean_regrouped = out.rows.iter().map(|r| r.regrouped).sum::<f64>() / n;
    out.all_negative = negatives.iter().sum::<f64>() / n;
    Ok(out)
}
