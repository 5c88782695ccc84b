mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use pixelhop::{
    auc, evaluate, loss_and_gradient, train_probe, LabelMatrix, ProbeModel, ProbeParams,
};
use proptest::prelude::*;
use rand::Rng;

fn single_class(labels: &[bool]) -> LabelMatrix {
    LabelMatrix::new(vec!["c".into()], labels.iter().map(|&l| vec![l]).collect()).unwrap()
}

#[test]
fn separable_toy_set_is_fit_exactly() {
    let mut r = rng(31);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..20 {
        let positive = i % 2 == 0;
        let cx = if positive { 2.0 } else { -2.0 };
        rows.extend([cx + r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
        labels.push(positive);
    }
    let x = DMatrix::from_row_slice(20, 2, &rows);
    let (probe, _) = train_probe(&x, &single_class(&labels), &ProbeParams::default()).unwrap();
    let scores = probe.predict(&x).unwrap();
    let correct = (0..20)
        .filter(|&i| (scores[(i, 0)] > 0.5) == labels[i])
        .count();
    assert_eq!(correct, 20);
}

#[test]
fn zero_features_learn_prevalence_logit() {
    let labels: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
    let x = DMatrix::<f64>::zeros(40, 3);
    let (probe, _) = train_probe(&x, &single_class(&labels), &ProbeParams::default()).unwrap();
    assert!(probe.weights.iter().all(|&w| w == 0.0));
    let prevalence: f64 = 0.25;
    let logit = (prevalence / (1.0 - prevalence)).ln();
    assert!(
        (probe.biases[0] - logit).abs() <= 1e-3,
        "{} vs {logit}",
        probe.biases[0]
    );
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut r = rng(32);
    let (m, d) = (30, 6);
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let y: Vec<bool> = (0..m).map(|_| r.random_bool(0.4)).collect();
    let x = DMatrix::from_fn(m, d, |i, j| rows[i][j]);
    let l2 = 1e-2;
    let h = 1e-5;
    for _ in 0..5 {
        let w: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let b = r.random_range(-1.0..1.0);
        let (loss, gw, gb) = loss_and_gradient(&x, &y, &DVector::from_vec(w.clone()), b, l2);
        assert!((loss - logistic_loss(&rows, &y, &w, b, l2)).abs() < 1e-12);
        let rel = |a: f64, f: f64| (a - f).abs() / f.abs().max(1e-8);
        for j in 0..d {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (logistic_loss(&rows, &y, &up, b, l2)
                - logistic_loss(&rows, &y, &down, b, l2))
                / (2.0 * h);
            assert!(rel(gw[j], fd) <= 1e-4, "w[{j}]: {} vs {fd}", gw[j]);
        }
        let fd = (logistic_loss(&rows, &y, &w, b + h, l2)
            - logistic_loss(&rows, &y, &w, b - h, l2))
            / (2.0 * h);
        assert!(rel(gb, fd) <= 1e-4);
    }
}

#[test]
fn loss_never_increases_at_default_rate() {
    let mut r = rng(33);
    let (m, d) = (80, 40);
    let x = DMatrix::from_fn(m, d, |i, j| {
        r.random_range(-1.0..1.0) * (1 + j % 5) as f64 + (i % 3) as f64
    });
    let classes = vec!["a".to_string(), "b".to_string()];
    let rows: Vec<Vec<bool>> = (0..m)
        .map(|i| vec![x[(i, 0)] + x[(i, 1)] > 1.0, r.random_bool(0.3)])
        .collect();
    let labels = LabelMatrix::new(classes, rows).unwrap();
    let (_, report) = train_probe(&x, &labels, &ProbeParams::default()).unwrap();
    for losses in &report.losses {
        assert_eq!(losses.len(), 501);
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(losses.last() <= losses.first());
    }
}

#[test]
fn predict_matches_affine_sigmoid_oracle() {
    let mut r = rng(34);
    let (c, d) = (3, 5);
    let w = DMatrix::from_fn(c, d, |_, _| r.random_range(-1.0..1.0));
    let b = DVector::from_fn(c, |_, _| r.random_range(-1.0..1.0));
    let probe = ProbeModel::new(
        w.clone(),
        b.clone(),
        vec!["a".into(), "b".into(), "c".into()],
    )
    .unwrap();
    let x = DMatrix::from_fn(7, d, |_, _| r.random_range(-3.0..3.0));
    let s = probe.predict(&x).unwrap();
    for i in 0..7 {
        for k in 0..c {
            let z: f64 = (0..d).map(|j| w[(k, j)] * x[(i, j)]).sum::<f64>() + b[k];
            assert!((s[(i, k)] - 1.0 / (1.0 + (-z).exp())).abs() <= 1e-12);
        }
    }
    // scores rise along the weight direction
    let dir: Vec<f64> = (0..d).map(|j| w[(0, j)]).collect();
    let line = DMatrix::from_fn(5, d, |t, j| t as f64 * 0.5 * dir[j]);
    let s = probe.predict(&line).unwrap();
    assert!((1..5).all(|t| s[(t, 0)] > s[(t - 1, 0)]));
}

#[test]
fn evaluate_reports_macro_over_classes() {
    let probe = ProbeModel::new(
        DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        DVector::zeros(2),
        vec!["up".into(), "down".into()],
    )
    .unwrap();
    let x = DMatrix::from_row_slice(4, 1, &[-1.0, 0.0, 1.0, 2.0]);
    let labels = LabelMatrix::new(
        vec!["up".into(), "down".into()],
        vec![
            vec![false, true],
            vec![false, true],
            vec![true, false],
            vec![true, false],
        ],
    )
    .unwrap();
    let report = evaluate(&probe, &x, &labels).unwrap();
    assert_eq!(report.macro_avg, 1.0);
}

#[test]
fn auc_matches_pairwise_counting() {
    let mut r = rng(35);
    for trial in 0..200 {
        let m = r.random_range(2..60);
        let mut labels: Vec<bool> = (0..m).map(|_| r.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let ties = trial % 3 == 0;
        let scores: Vec<f64> = (0..m)
            .map(|_| {
                let s: f64 = r.random_range(0.0..1.0);
                if ties {
                    (s * 4.0).floor()
                } else {
                    s
                }
            })
            .collect();
        let got = auc(&scores, &labels).unwrap();
        assert!((got - pairwise_auc(&scores, &labels)).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn auc_is_rank_invariant(scores in prop::collection::vec(0.0f64..1.0, 4..50), seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let base = auc(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert_eq!(auc(&cubed, &labels).unwrap(), base);
        prop_assert_eq!(auc(&exp, &labels).unwrap(), base);
    }

    #[test]
    fn auc_complement_symmetry(seed in 0u64..1000, m in 4usize..60) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..m).map(|_| r.random_range(0.0..1.0)).collect();
        let mut labels: Vec<bool> = (0..m).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((auc(&neg, &labels).unwrap() - (1.0 - a)).abs() <= 1e-12);
    }
}
