//! Synthetic anomaly injection for review experiments.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, ScoredAnswer, Scorer};
use crate::seed::rng_for;

/// Minimum shift, as a fraction of full points.
pub const INJECTION_FLOOR: f64 = 0.3;
/// Maximum drawn shift, as a fraction of full points.
pub const INJECTION_CEILING: f64 = 0.6;

/// Ground truth for one perturbed answer-score pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub answer_id: String,
    pub original_score: f64,
    pub injected_score: f64,
    pub seed: u64,
}

/// Shifts `old` by `delta` in the preferred direction, clamped to
/// `[0, full_points]`. If clamping would leave the shift below the floor
/// the opposite direction is used instead.
pub fn perturb_score(old: f64, full_points: f64, delta: f64, upward: bool) -> f64 {
    let floor = INJECTION_FLOOR * full_points;
    let shifted = |up: bool| {
        let raw = if up { old + delta } else { old - delta };
        raw.clamp(0.0, full_points)
    };
    let first = shifted(upward);
    if (first - old).abs() + 1e-12 >= floor {
        first
    } else {
        shifted(!upward)
    }
}

/// Replaces `ceil(fraction * n)` pairs with perturbed scores.
///
/// Pairs are ordered by ascending answer id before the seeded shuffle, so
/// the result does not depend on input order. Returned pairs are in
/// ascending id order; modified ones carry [`Scorer::Injected`].
pub fn inject_anomalies(
    pairs: &[ScoredAnswer],
    full_points: f64,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<ScoredAnswer>, Vec<InjectionRecord>), CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::Injection(format!("fraction {fraction} outside (0, 1)")));
    }
    if pairs.is_empty() {
        return Err(CorpusError::Injection("no pairs to perturb".into()));
    }
    let count = (fraction * pairs.len() as f64).ceil() as usize;
    if fraction * (pairs.len() as f64) < 1.0 {
        return Err(CorpusError::Injection(format!(
            "fraction {fraction} of {} pairs selects less than one pair",
            pairs.len()
        )));
    }

    let mut sorted: Vec<ScoredAnswer> = pairs.to_vec();
    sorted.sort_by(|a, b| a.answer_id.cmp(&b.answer_id));
    let mut order: Vec<usize> = (0..sorted.len()).collect();
    order.shuffle(&mut rng_for(seed, "inject-select", ""));
    let mut chosen: Vec<usize> = order.into_iter().take(count).collect();
    chosen.sort_unstable();

    let mut records = Vec::with_capacity(count);
    for idx in chosen {
        let pair = &mut sorted[idx];
        let mut rng = rng_for(seed, "inject-shift", &pair.answer_id);
        let delta = rng.random_range(INJECTION_FLOOR * full_points..=INJECTION_CEILING * full_points);
        let upward = rng.random_bool(0.5);
        let injected = perturb_score(pair.score, full_points, delta, upward);
        records.push(InjectionRecord {
            answer_id: pair.answer_id.clone(),
            original_score: pair.score,
            injected_score: injected,
            seed,
        });
        pair.score = injected;
        pair.scorer = Scorer::Injected;
        pair.rationale = None;
    }
    Ok((sorted, records))
}
