use proptest::prelude::*;
use shadowopt_core::diagnostics::*;
use shadowopt_core::net::{TrainHyperparams, TrainingLog};

fn log(train: impl Fn(f64) -> f64, val: impl Fn(f64) -> f64, epochs: usize) -> TrainingLog {
    TrainingLog {
        train_loss: (0..epochs).map(|e| train(e as f64)).collect(),
        val_loss: (0..epochs).map(|e| val(e as f64)).collect(),
        ..Default::default()
    }
}

fn label(l: &TrainingLog) -> VerdictLabel {
    classify(l, &TrainHyperparams::default(), None).unwrap().label
}

#[test]
fn healthy_curves_are_good() {
    let l = log(|e| 0.1 + 2.0 * (-e / 20.0).exp(), |e| 0.12 + 2.0 * (-e / 20.0).exp(), 200);
    assert_eq!(label(&l), VerdictLabel::GoodPerformance);
}

#[test]
fn rising_validation_far_above_training_is_overfitting() {
    let l = log(|e| 0.01 + 2.0 * (-e / 10.0).exp(), |e| 0.5 + 2.0 * (-e / 10.0).exp() + 0.004 * e, 200);
    assert_eq!(label(&l), VerdictLabel::Overfitting);
}

#[test]
fn high_plateau_is_underfitting() {
    let l = log(|e| 1.5 + 0.5 * (-e / 10.0).exp(), |e| 1.55 + 0.5 * (-e / 10.0).exp(), 200);
    assert_eq!(label(&l), VerdictLabel::Underfitting);
}

#[test]
fn training_far_above_validation_is_regularization() {
    let l = log(|e| 1.0 + 1.0 * (-e / 10.0).exp(), |e| 0.3 + 1.5 * (-e / 10.0).exp(), 200);
    assert_eq!(label(&l), VerdictLabel::Regularization);
}

#[test]
fn flat_validation_or_broken_losses_are_erroneous_data() {
    let l = log(|e| 1.0 - 0.001 * e, |_| 1.0, 100);
    let v = classify(&l, &TrainHyperparams::default(), None).unwrap();
    assert_eq!(v.label, VerdictLabel::ErroneousTrainingData);
    assert_eq!(v.reason_key, "diagnostics.val_loss_not_decreasing");

    let mut l = log(|e| 1.0 / (1.0 + e), |e| 1.0 / (1.0 + e), 50);
    l.val_loss[20] = f64::NAN;
    assert_eq!(classify(&l, &TrainHyperparams::default(), None).unwrap().reason_key, "diagnostics.non_finite_loss");

    let l = TrainingLog { train_loss: vec![1.0, 2.0], val_loss: vec![1.0, 2.0], aborted: Some("nan".into()), ..Default::default() };
    assert_eq!(label(&l), VerdictLabel::ErroneousTrainingData);
}

#[test]
fn short_logs_cannot_be_classified() {
    let l = log(|e| 1.0 / (1.0 + e), |e| 1.0 / (1.0 + e), MIN_EPOCHS - 1);
    assert_eq!(classify(&l, &TrainHyperparams::default(), None).unwrap_err().key(), "diagnostics.log_too_short");
}

#[test]
fn verdict_keys_follow_the_label() {
    let l = log(|e| 0.1 + 2.0 * (-e / 20.0).exp(), |e| 0.12 + 2.0 * (-e / 20.0).exp(), 100);
    let v = classify(&l, &TrainHyperparams::default(), None).unwrap();
    assert_eq!(v.explanation_key, "diagnostics.good_performance");
    assert_eq!(v.evidence.epochs, 100);
}

proptest! {
    #[test]
    fn slope_recovers_lines(a in -5.0f64..5.0, b in -3.0f64..3.0, n in 2usize..200) {
        let v: Vec<f64> = (0..n).map(|i| a + b * i as f64).collect();
        prop_assert!((slope(&v) - b).abs() < 1e-9);
    }

    #[test]
    fn smoothing_preserves_length_constants_and_lines(c in -5.0f64..5.0, n in 1usize..100, w in 1usize..15) {
        let s = smooth(&vec![c; n], w);
        prop_assert_eq!(s.len(), n);
        prop_assert!(s.iter().all(|v| (v - c).abs() < 1e-12));
        let line: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let s = smooth(&line, w);
        prop_assert!(s.iter().zip(&line).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}
