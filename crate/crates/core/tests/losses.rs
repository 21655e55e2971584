mod common;

use common::rel_err;
use hoigen::stream::{uncertainty_loss, MlpSpec, StreamModel, StreamOutput};
use hoigen::ugt::{batch_loss, bce, unlabeled_loss, BatchThresholds, Verdict};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(seed: u64, uncertainty: bool) -> (StreamModel, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = rng.random_range(2..6);
    let n_verbs = rng.random_range(1..4);
    let model = StreamModel::new(&MlpSpec {
        input_dim,
        hidden: vec![rng.random_range(2..6)],
        n_verbs,
        uncertainty,
        seed,
    })
    .unwrap();
    let x = (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = (0..n_verbs).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    (model, x, y)
}

fn check_stream_gradient(seed: u64, uncertainty: bool) {
    let (model, x, y) = random_model(seed, uncertainty);
    let (grads, _) = model.backward(&x, &y).unwrap();
    let analytic = grads.flat();
    let loss = |m: &StreamModel| m.backward(&x, &y).unwrap().1;
    let h = 1e-6;
    for i in 0..analytic.len() {
        let mut plus = model.clone();
        *plus.network_mut().parameter_mut(i) += h;
        let mut minus = model.clone();
        *minus.network_mut().parameter_mut(i) -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let err = rel_err(analytic[i], fd);
        assert!(err < 1e-4, "seed {seed} param {i}: analytic {} fd {fd}", analytic[i]);
    }
}

#[test]
fn uncertainty_stream_gradient_matches_finite_differences() {
    for seed in 0..20 {
        check_stream_gradient(seed, true);
    }
}

#[test]
fn bce_stream_gradient_matches_finite_differences() {
    for seed in 100..110 {
        check_stream_gradient(seed, false);
    }
}

fn thresholds() -> impl Strategy<Value = BatchThresholds> {
    (0.05f64..0.95, 0.05f64..0.95, 0.1f64..5.0).prop_map(|(a, b, eps)| {
        let (p_n, p_p) = if a < b { (a, b) } else { (b, a) };
        BatchThresholds { p_p, p_n, p_m: (p_p + p_n) / 2.0, eps }
    })
}

proptest! {
    #[test]
    fn uncertainty_loss_is_finite_and_bounded_below(s in -50.0f64..50.0, e in -30.0f64..30.0, y in 0.0f64..=1.0) {
        let l = uncertainty_loss(s, e, y).unwrap();
        prop_assert!(l.is_finite());
        prop_assert!(l >= -5.0 - 1e-12);
    }

    #[test]
    fn false_verdict_loss_falls_as_variance_rises(s in -4.0f64..4.0, e in -3.0f64..3.0, d in 0.01f64..1.0, th in thresholds()) {
        let (v1, l1) = unlabeled_loss(s, e, &th).unwrap();
        let (v2, l2) = unlabeled_loss(s, e + d, &th).unwrap();
        if matches!(v1, Verdict::FalsePositive | Verdict::FalseNegative) && v1 == v2 {
            prop_assert!(l2 < l1);
        }
    }

    #[test]
    fn true_positive_loss_falls_with_confidence(s in -4.0f64..4.0, d in 0.01f64..2.0, e in -3.0f64..3.0, th in thresholds()) {
        let (v1, l1) = unlabeled_loss(s, e, &th).unwrap();
        let (v2, l2) = unlabeled_loss(s + d, e, &th).unwrap();
        if v1 == Verdict::TruePositive && v2 == Verdict::TruePositive {
            prop_assert!(l2 < l1);
        }
        let (w1, m1) = unlabeled_loss(-s, e, &th).unwrap();
        let (w2, m2) = unlabeled_loss(-s - d, e, &th).unwrap();
        if w1 == Verdict::TrueNegative && w2 == Verdict::TrueNegative {
            prop_assert!(m2 < m1);
        }
    }

    #[test]
    fn bce_is_finite_and_non_negative(p in 0.0f64..=1.0, y in prop_oneof![Just(0.0), Just(1.0)]) {
        let l = bce(p, y);
        prop_assert!(l >= 0.0);
        prop_assert!(l.is_finite());
    }

    #[test]
    fn every_unlabeled_pair_gets_exactly_one_verdict(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = rng.random_range(1..5);
        let out = |rng: &mut ChaCha8Rng| StreamOutput {
            s: (0..v).map(|_| rng.random_range(-4.0..4.0)).collect(),
            e: (0..v).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let labeled: Vec<(StreamOutput, Vec<f64>)> = (0..rng.random_range(1..8))
            .map(|_| {
                let o = out(&mut rng);
                let y = (0..v).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
                (o, y)
            })
            .collect();
        let unlabeled: Vec<StreamOutput> = (0..rng.random_range(0..8)).map(|_| out(&mut rng)).collect();
        let r = batch_loss(&labeled, &unlabeled, 0.1).unwrap();
        prop_assert_eq!(r.verdicts.len(), unlabeled.len());
        for (j, th) in r.thresholds.iter().enumerate() {
            let has_pos = labeled.iter().any(|(_, y)| y[j] > 0.5);
            let has_neg = labeled.iter().any(|(_, y)| y[j] < 0.5);
            prop_assert_eq!(th.is_some(), has_pos && has_neg);
            for (row, u) in r.verdicts.iter().zip(&unlabeled) {
                prop_assert_eq!(row.len(), v);
                match th {
                    Some(th) => {
                        let (verdict, _) = unlabeled_loss(u.s[j], u.e[j], th).unwrap();
                        prop_assert_eq!(row[j], Some(verdict));
                    }
                    None => prop_assert_eq!(row[j], None),
                }
            }
        }
        prop_assert!(r.loss.is_finite());
    }
}
