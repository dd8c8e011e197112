//! Regression metrics for grading runs: MAE, RMSE, NRMSE and Pearson
//! correlation, plus repetition aggregation and table rendering.
//!
//! Everything here is generic over the scalar type; `f64` aliases live at
//! the crate root.

mod report;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use report::{aggregate, cell, emit_table, MetricRow, RepetitionRow, ExperimentReport, Table, TableFormat};

/// Scalar usable for metric computation.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static {}

impl<T> Scalar for T where T: Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static {}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {human} human scores vs {predicted} predicted")]
    LengthMismatch { human: usize, predicted: usize },
    #[error("no score pairs")]
    Empty,
    #[error("value {value} at index {index} outside [0, {full_points}]")]
    OutOfBounds { index: usize, value: f64, full_points: f64 },
    #[error("normalizer must be positive, got {0}")]
    ZeroNormalizer(f64),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),
    #[error("cannot aggregate rows from different configurations: {0} vs {1}")]
    MixedConfigs(String, String),
}

fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Human scores `s_i`, predicted scores `ŝ_i` and the question's full
/// points. Construction enforces equal non-zero lengths and bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePairVector<T> {
    human: Vec<T>,
    predicted: Vec<T>,
    full_points: T,
}

impl<T: Scalar> ScorePairVector<T> {
    pub fn new(human: Vec<T>, predicted: Vec<T>, full_points: T) -> Result<Self, MetricsError> {
        if human.len() != predicted.len() {
            return Err(MetricsError::LengthMismatch { human: human.len(), predicted: predicted.len() });
        }
        if human.is_empty() {
            return Err(MetricsError::Empty);
        }
        if !(full_points > T::zero()) || !full_points.is_finite() {
            return Err(MetricsError::ZeroNormalizer(to_f64(full_points)));
        }
        for (index, &value) in human.iter().chain(predicted.iter()).enumerate() {
            if !(value >= T::zero() && value <= full_points) {
                return Err(MetricsError::OutOfBounds {
                    index: index % human.len(),
                    value: to_f64(value),
                    full_points: to_f64(full_points),
                });
            }
        }
        Ok(ScorePairVector { human, predicted, full_points })
    }

    pub fn len(&self) -> usize {
        self.human.len()
    }

    pub fn is_empty(&self) -> bool {
        self.human.is_empty()
    }

    pub fn human(&self) -> &[T] {
        &self.human
    }

    pub fn predicted(&self) -> &[T] {
        &self.predicted
    }

    pub fn full_points(&self) -> T {
        self.full_points
    }

    fn count(&self) -> T {
        T::from_usize(self.len()).expect("length fits the scalar")
    }

    fn diffs(&self) -> impl Iterator<Item = T> + '_ {
        self.human.iter().zip(&self.predicted).map(|(&s, &p)| s - p)
    }
}

pub fn mae<T: Scalar>(v: &ScorePairVector<T>) -> T {
    v.diffs().map(Float::abs).fold(T::zero(), |a, b| a + b) / v.count()
}

pub fn rmse<T: Scalar>(v: &ScorePairVector<T>) -> T {
    (v.diffs().map(|d| d * d).fold(T::zero(), |a, b| a + b) / v.count()).sqrt()
}

/// RMSE divided by the question's full points.
pub fn nrmse<T: Scalar>(v: &ScorePairVector<T>) -> Result<T, MetricsError> {
    nrmse_from(rmse(v), v.full_points())
}

pub fn nrmse_from<T: Scalar>(rmse: T, normalizer: T) -> Result<T, MetricsError> {
    if !(normalizer > T::zero()) {
        return Err(MetricsError::ZeroNormalizer(to_f64(normalizer)));
    }
    Ok(rmse / normalizer)
}

/// Sample Pearson correlation. Constant inputs are an error, not zero.
pub fn pearson<T: Scalar>(v: &ScorePairVector<T>) -> Result<T, MetricsError> {
    if v.len() < 2 {
        return Err(MetricsError::UndefinedCorrelation("needs at least two pairs"));
    }
    let n = v.count();
    let mean_h = v.human.iter().fold(T::zero(), |a, &b| a + b) / n;
    let mean_p = v.predicted.iter().fold(T::zero(), |a, &b| a + b) / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&h, &p) in v.human.iter().zip(&v.predicted) {
        let dx = h - mean_h;
        let dy = p - mean_p;
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx == T::zero() {
        return Err(MetricsError::UndefinedCorrelation("human scores are constant"));
    }
    if syy == T::zero() {
        return Err(MetricsError::UndefinedCorrelation("predicted scores are constant"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// All four metrics for one vector.
pub fn evaluate<T: Scalar>(v: &ScorePairVector<T>) -> MetricRow<T> {
    let rmse = rmse(v);
    MetricRow {
        mae: mae(v),
        rmse,
        nrmse: rmse / v.full_points(),
        pearson: pearson(v).ok(),
    }
}
