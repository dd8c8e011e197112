mod common;

use common::reference;
use gradeflow::metrics::{evaluate, mae, nrmse_from, pearson, rmse, MetricsError, ScorePairVector};
use gradeflow::ScorePairsF32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_exact_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let full: f64 = [5.0, 10.0, 15.0, 19.0][rng.random_range(0..4)];
        let human: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=full)).collect();
        let predicted: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=full)).collect();
        let r = reference(&human, &predicted, full);
        let v = ScorePairVector::new(human, predicted, full).unwrap();
        let m = evaluate(&v);
        assert!((m.mae - r.mae).abs() <= 1e-12);
        assert!((m.rmse - r.rmse).abs() <= 1e-12);
        assert!((m.nrmse - r.nrmse).abs() <= 1e-12);
        match (m.pearson, r.pearson) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "{a} vs {b}"),
            (None, None) => {}
            other => panic!("pearson definedness differs: {other:?}"),
        }
        assert!(m.rmse >= m.mae);
        assert!(m.nrmse <= 1.0);
    }
}

#[test]
fn half_point_grades() {
    let v = ScorePairVector::new(vec![13.0, 10.5, 4.0, 15.0], vec![12.5, 10.5, 6.0, 14.0], 15.0).unwrap();
    let r = reference(v.human(), v.predicted(), 15.0);
    assert_eq!(mae(&v), r.mae);
    assert!((rmse(&v) - r.rmse).abs() < 1e-15);
    assert!((pearson(&v).unwrap() - r.pearson.unwrap()).abs() < 1e-15);
}

#[test]
fn single_precision_agrees() {
    let v: ScorePairsF32 = ScorePairVector::new(vec![1.0, 2.0, 3.0, 4.0], vec![1.5, 2.0, 2.5, 4.5], 5.0).unwrap();
    assert!((mae(&v) - 0.375).abs() < 1e-6);
    assert!((pearson(&v).unwrap() - 0.9326733).abs() < 1e-5);
}

#[test]
fn published_nrmse_cells() {
    assert_eq!(format!("{:.2}", nrmse_from(8.98, 19.0).unwrap()), "0.47");
    assert_eq!(format!("{:.2}", nrmse_from(5.62, 19.0).unwrap()), "0.30");
    assert!(matches!(nrmse_from(1.0, 0.0), Err(MetricsError::ZeroNormalizer(_))));
}
