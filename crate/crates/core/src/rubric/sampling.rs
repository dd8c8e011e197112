use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::RubricError;
use crate::corpus::ScoredAnswer;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    Random,
    DistributionAware,
}

impl SamplingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMethod::Random => "random",
            SamplingMethod::DistributionAware => "distribution_aware",
        }
    }
}

impl std::str::FromStr for SamplingMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "distribution" | "distribution_aware" | "distribution-aware" => Ok(Self::DistributionAware),
            other => Err(format!("unknown sampling method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub lower: f64,
    pub upper: f64,
    pub answer_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub strata: Vec<Stratum>,
    pub proportions: Vec<f64>,
}

impl ScoreDistribution {
    pub fn counts(&self) -> Vec<usize> {
        self.strata.iter().map(|s| s.answer_ids.len()).collect()
    }

    pub fn total(&self) -> usize {
        self.strata.iter().map(|s| s.answer_ids.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub iteration: u32,
    pub method: SamplingMethod,
    pub answer_ids: Vec<String>,
    /// Per-stratum allocation, distribution-aware sampling only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<Vec<usize>>,
}

/// Uniform sample without replacement of `min(m, remaining)` ids from
/// `pool` minus `used`. Sampled ids are added to `used`.
pub fn sample_random(
    pool: &[String],
    m: usize,
    seed: u64,
    iteration: u32,
    used: &mut BTreeSet<String>,
) -> Result<SampleBatch, RubricError> {
    let mut remaining: Vec<&String> = pool.iter().filter(|id| !used.contains(*id)).collect();
    remaining.sort();
    remaining.dedup();
    if remaining.is_empty() {
        return Err(RubricError::PoolExhausted { iteration });
    }
    let mut rng = rng_for(seed, "sample-random", &iteration.to_string());
    remaining.shuffle(&mut rng);
    let mut answer_ids: Vec<String> = remaining.into_iter().take(m).cloned().collect();
    answer_ids.sort();
    used.extend(answer_ids.iter().cloned());
    Ok(SampleBatch { iteration, method: SamplingMethod::Random, answer_ids, allocation: None })
}

fn bin_of(score: f64, k: usize, full_points: f64) -> usize {
    let raw = (score * k as f64 / full_points).floor();
    (raw.max(0.0) as usize).min(k - 1)
}

/// `k` equal-width bins over `[0, full_points]`; the last bin includes its
/// upper edge.
pub fn stratify(scores: &[ScoredAnswer], k: usize, full_points: f64) -> Result<ScoreDistribution, RubricError> {
    if k < 2 {
        return Err(RubricError::Config(format!("strata count must be at least 2, got {k}")));
    }
    if scores.is_empty() {
        return Err(RubricError::NoGradedAnswers);
    }
    let width = full_points / k as f64;
    let mut strata: Vec<Stratum> = (0..k)
        .map(|l| Stratum { lower: l as f64 * width, upper: if l + 1 == k { full_points } else { (l + 1) as f64 * width }, answer_ids: Vec::new() })
        .collect();
    for s in scores {
        strata[bin_of(s.score, k, full_points)].answer_ids.push(s.answer_id.clone());
    }
    for stratum in &mut strata {
        stratum.answer_ids.sort();
    }
    let n = scores.len() as f64;
    let proportions = strata.iter().map(|s| s.answer_ids.len() as f64 / n).collect();
    Ok(ScoreDistribution { strata, proportions })
}

/// Per-stratum sample sizes, before and after trimming.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub ceil: Vec<usize>,
    pub sizes: Vec<usize>,
}

/// Allocates `m` samples as `ceil(p_l * m)` per non-empty stratum, then
/// trims the largest entry (lowest index on ties, never below one) until
/// the sum fits `m`. Entries are capped by stratum size, and any shortfall
/// is refilled from strata with spare capacity.
pub fn allocate(distribution: &ScoreDistribution, m: usize) -> Result<Allocation, RubricError> {
    let counts = distribution.counts();
    let n = distribution.total();
    let non_empty = counts.iter().filter(|&&c| c > 0).count();
    if n == 0 {
        return Err(RubricError::NoGradedAnswers);
    }
    if m < non_empty {
        return Err(RubricError::Config(format!("sample size {m} is smaller than the {non_empty} non-empty strata")));
    }
    let ceil: Vec<usize> = counts.iter().map(|&c| (c * m).div_ceil(n)).collect();
    let mut sizes: Vec<usize> = ceil.iter().zip(&counts).map(|(&a, &c)| a.min(c)).collect();

    while sizes.iter().sum::<usize>() > m {
        let mut best: Option<usize> = None;
        for (l, &s) in sizes.iter().enumerate() {
            if s > 1 && best.is_none_or(|b| s > sizes[b]) {
                best = Some(l);
            }
        }
        match best {
            Some(l) => sizes[l] -= 1,
            None => break,
        }
    }

    let target = m.min(n);
    while sizes.iter().sum::<usize>() < target {
        let mut best: Option<usize> = None;
        for l in 0..sizes.len() {
            if sizes[l] < counts[l] && best.is_none_or(|b| counts[l] - sizes[l] > counts[b] - sizes[b]) {
                best = Some(l);
            }
        }
        match best {
            Some(l) => sizes[l] += 1,
            None => break,
        }
    }
    Ok(Allocation { ceil, sizes })
}

/// Seeded uniform sample of `allocation[l]` ids from each stratum.
pub fn sample_strata(
    distribution: &ScoreDistribution,
    allocation: &Allocation,
    seed: u64,
    iteration: u32,
) -> SampleBatch {
    let mut answer_ids = Vec::new();
    for (l, (stratum, &take)) in distribution.strata.iter().zip(&allocation.sizes).enumerate() {
        let mut ids = stratum.answer_ids.clone();
        let mut rng = rng_for(seed, "sample-stratum", &format!("{iteration}/{l}"));
        ids.shuffle(&mut rng);
        answer_ids.extend(ids.into_iter().take(take));
    }
    answer_ids.sort();
    SampleBatch {
        iteration,
        method: SamplingMethod::DistributionAware,
        answer_ids,
        allocation: Some(allocation.sizes.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Scorer;

    fn scored(scores: &[f64]) -> Vec<ScoredAnswer> {
        scores.iter().enumerate().map(|(i, &s)| ScoredAnswer::new(format!("a{i:02}"), s, Scorer::Llm)).collect()
    }

    fn dist_with_counts(counts: &[usize]) -> ScoreDistribution {
        let n: usize = counts.iter().sum();
        let mut next = 0;
        let strata = counts
            .iter()
            .map(|&c| {
                let ids = (next..next + c).map(|i| format!("a{i:02}")).collect();
                next += c;
                Stratum { lower: 0.0, upper: 0.0, answer_ids: ids }
            })
            .collect();
        ScoreDistribution { strata, proportions: counts.iter().map(|&c| c as f64 / n as f64).collect() }
    }

    fn pool(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("a{i:02}")).collect()
    }

    #[test]
    fn random_sampling() {
        let mut used = BTreeSet::new();
        let b = sample_random(&pool(40), 8, 3, 1, &mut used).unwrap();
        assert_eq!(b.answer_ids.len(), 8);
        assert_eq!(used.len(), 8);
        let again = sample_random(&pool(40), 8, 3, 1, &mut BTreeSet::new()).unwrap();
        assert_eq!(b, again);
        let small = sample_random(&pool(5), 8, 3, 1, &mut BTreeSet::new()).unwrap();
        assert_eq!(small.answer_ids.len(), 5);
        let mut all: BTreeSet<String> = pool(3).into_iter().collect();
        assert!(matches!(sample_random(&pool(3), 2, 0, 4, &mut all), Err(RubricError::PoolExhausted { iteration: 4 })));
    }

    #[test]
    fn stratify_examples() {
        let d = stratify(&scored(&[0.0, 7.5, 15.0]), 3, 15.0).unwrap();
        assert_eq!(d.counts(), vec![1, 1, 1]);
        let d = stratify(&scored(&[15.0; 4]), 3, 15.0).unwrap();
        assert_eq!(d.counts(), vec![0, 0, 4]);
        assert_eq!(d.proportions[2], 1.0);
        let d = stratify(&scored(&[2.0, 2.0, 9.0, 9.0, 9.0, 14.0]), 3, 15.0).unwrap();
        assert_eq!(d.counts(), vec![2, 3, 1]);
        assert_eq!(d.proportions, vec![2.0 / 6.0, 0.5, 1.0 / 6.0]);
        assert!(stratify(&[], 3, 15.0).is_err());
        assert!(stratify(&scored(&[1.0]), 1, 15.0).is_err());
    }

    #[test]
    fn allocation_trim_rule() {
        let a = allocate(&dist_with_counts(&[4, 8, 12, 10, 6]), 8).unwrap();
        assert_eq!(a.ceil, vec![1, 2, 3, 2, 2]);
        assert_eq!(a.sizes, vec![1, 1, 2, 2, 2]);
        assert_eq!(allocate(&dist_with_counts(&[0, 10]), 5).unwrap().sizes, vec![0, 5]);
        assert_eq!(allocate(&dist_with_counts(&[3, 3]), 4).unwrap().sizes, vec![2, 2]);
        assert!(allocate(&dist_with_counts(&[1, 1, 1]), 2).is_err());
    }

    #[test]
    fn trim_can_exceed_stratum_count_deviation() {
        // p·m = [2.22, 5.56, 1.11, 1.11]; trimming the largest quota lands on [3, 3, 2, 2]
        let d = dist_with_counts(&[4, 10, 2, 2]);
        let a = allocate(&d, 10).unwrap();
        assert_eq!(a.ceil, vec![3, 6, 2, 2]);
        assert_eq!(a.sizes, vec![3, 3, 2, 2]);
        let dev: f64 = [4.0, 10.0, 2.0, 2.0].iter().zip(&a.sizes).map(|(c, &s)| (s as f64 - c / 18.0 * 10.0).abs()).sum();
        assert!(dev > 4.0 && dev <= 6.0);
    }

    #[test]
    fn allocation_respects_capacity() {
        // ceil gives [1, 4]; first stratum only has 1, second has 3
        let a = allocate(&dist_with_counts(&[1, 3]), 5).unwrap();
        assert_eq!(a.sizes, vec![1, 3]);
    }

    #[test]
    fn stratified_sample_is_deterministic() {
        let d = dist_with_counts(&[4, 8, 12, 10, 6]);
        let a = allocate(&d, 8).unwrap();
        let b1 = sample_strata(&d, &a, 9, 1);
        assert_eq!(b1, sample_strata(&d, &a, 9, 1));
        assert_eq!(b1.answer_ids.len(), 8);
        assert_ne!(b1.answer_ids, sample_strata(&d, &a, 10, 1).answer_ids);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn allocation_invariants(counts in prop::collection::vec(0usize..15, 2..7), m in 1usize..30) {
                let d = dist_with_counts(&counts);
                let n = d.total();
                let non_empty = counts.iter().filter(|&&c| c > 0).count();
                prop_assume!(n > 0 && m >= non_empty);
                let a = allocate(&d, m).unwrap();
                for l in 0..counts.len() {
                    prop_assert_eq!(a.ceil[l], (counts[l] * m).div_ceil(n));
                    prop_assert!(a.sizes[l] <= counts[l]);
                    if counts[l] > 0 { prop_assert!(a.sizes[l] >= 1); }
                }
                prop_assert_eq!(a.sizes.iter().sum::<usize>(), m.min(n));
                let dev: f64 = counts.iter().zip(&a.sizes)
                    .map(|(&c, &s)| (s as f64 - c as f64 / n as f64 * m as f64).abs()).sum();
                if m <= n && a.ceil.iter().zip(&counts).all(|(a, c)| a <= c) {
                    prop_assert!(dev <= 2.0 * (counts.len() - 1) as f64 + 1e-9);
                }
            }

            #[test]
            fn stratify_partitions(scores in prop::collection::vec(0.0f64..=15.0, 1..50), k in 2usize..8) {
                let d = stratify(&scored(&scores), k, 15.0).unwrap();
                prop_assert_eq!(d.total(), scores.len());
                prop_assert!((d.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
