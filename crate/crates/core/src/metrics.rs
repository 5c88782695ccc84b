//! Rank-based ROC AUC and per-class evaluation of a probe.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::probe::{LabelMatrix, ProbeModel};
use crate::scalar::Scalar;

fn check_inputs<T: PartialOrd>(scores: &[T], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    #[allow(clippy::eq_op)]
    if scores.iter().any(|s| s.partial_cmp(s).is_none()) {
        return Err(Error::UndefinedAuc("scores contain NaN".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {positives} positive and {negatives} negative"
        )));
    }
    Ok((positives, negatives))
}

fn sorted_order<T: PartialOrd>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN rejected"));
    order
}

/// Mann-Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc<T: PartialOrd + Copy>(scores: &[T], labels: &[bool]) -> Result<f64> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let order = sorted_order(scores);

    // Sum of midranks (1-based) over positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let tied_positives = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * tied_positives as f64;
        i = j;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// ROC operating points `(fpr, tpr)` from the strictest threshold down,
/// one point per distinct score, starting at `(0, 0)` and ending at `(1, 1)`.
pub fn roc_curve<T: PartialOrd + Copy>(scores: &[T], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    let mut order = sorted_order(scores);
    order.reverse();
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
        i = j;
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAuc {
    pub class: String,
    /// `None` when the class lacks positives or negatives.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<ClassAuc>,
    pub macro_avg: f64,
}

impl EvalReport {
    pub fn skipped(&self) -> Vec<&str> {
        self.per_class
            .iter()
            .filter(|c| c.auc.is_none())
            .map(|c| c.class.as_str())
            .collect()
    }
}

/// Per-class AUC of a score matrix and its macro average over defined classes.
pub fn evaluate_scores<T: Scalar>(scores: &DMatrix<T>, labels: &LabelMatrix) -> Result<EvalReport> {
    if scores.nrows() != labels.rows() || scores.ncols() != labels.classes().len() {
        return Err(Error::Dimension(format!(
            "scores are {}x{}, labels are {}x{}",
            scores.nrows(),
            scores.ncols(),
            labels.rows(),
            labels.classes().len()
        )));
    }
    let mut per_class = Vec::with_capacity(scores.ncols());
    let mut defined = Vec::new();
    for (c, class) in labels.classes().iter().enumerate() {
        let col: Vec<T> = scores.column(c).iter().copied().collect();
        let value = match auc(&col, &labels.column(c)) {
            Ok(v) => Some(v),
            Err(Error::UndefinedAuc(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(v) = value {
            defined.push(v);
        }
        per_class.push(ClassAuc {
            class: class.clone(),
            auc: value,
        });
    }
    if defined.is_empty() {
        return Err(Error::NoEvaluableClass);
    }
    let macro_avg = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(EvalReport {
        per_class,
        macro_avg,
    })
}

pub fn evaluate<T: Scalar>(
    probe: &ProbeModel<T>,
    features: &DMatrix<T>,
    labels: &LabelMatrix,
) -> Result<EvalReport> {
    if probe.classes != labels.classes() {
        return Err(Error::Schema("probe and label classes differ".into()));
    }
    evaluate_scores(&probe.predict(features)?, labels)
}
