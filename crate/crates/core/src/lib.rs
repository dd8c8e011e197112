//! Rubric generation, LLM grading and post-grading review for
//! short-answer assessment.

pub mod corpus;
pub mod grader;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod review;
pub mod rubric;
pub mod seed;
pub mod store;

#[cfg(test)]
pub(crate) mod testutil;

/// Score pairs at the precision the pipeline uses.
pub type ScorePairs = metrics::ScorePairVector<f64>;
pub type ScorePairsF32 = metrics::ScorePairVector<f32>;
pub type Metrics = metrics::MetricRow<f64>;
pub type Report = metrics::ExperimentReport<f64>;
