//! Multi-label linear probe: one independent logistic regression per class,
//! trained by full-batch gradient descent from zero.
//!
//! Features are standardized and then divided by the square root of the
//! largest eigenvalue of their correlation matrix before training. That
//! bounds the curvature of the logistic loss by `1/4 + l2`, so any learning
//! rate below `2 / (1/4 + l2)` decreases the loss monotonically. The fitted
//! weights are mapped back so the stored model acts on raw features.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Binary indicators, one row per example, one column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    classes: Vec<String>,
    rows: usize,
    data: Vec<bool>,
}

impl LabelMatrix {
    pub fn new(classes: Vec<String>, rows: Vec<Vec<bool>>) -> Result<Self> {
        if let Some((i, r)) = rows
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != classes.len())
        {
            return Err(Error::Dimension(format!(
                "label row {i} has {} entries, expected {}",
                r.len(),
                classes.len()
            )));
        }
        Ok(Self {
            rows: rows.len(),
            data: rows.concat(),
            classes,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn get(&self, row: usize, class: usize) -> bool {
        self.data[row * self.classes.len() + class]
    }

    pub fn column(&self, class: usize) -> Vec<bool> {
        (0..self.rows).map(|r| self.get(r, class)).collect()
    }

    pub fn row(&self, row: usize) -> &[bool] {
        let c = self.classes.len();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            classes: self.classes.clone(),
            rows: rows.len(),
            data: rows
                .iter()
                .flat_map(|&r| self.row(r).iter().copied())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeParams {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 500,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel<T: Scalar> {
    /// `classes × dim`.
    pub weights: DMatrix<T>,
    pub biases: DVector<T>,
    pub classes: Vec<String>,
}

impl<T: Scalar> ProbeModel<T> {
    pub fn new(weights: DMatrix<T>, biases: DVector<T>, classes: Vec<String>) -> Result<Self> {
        if weights.nrows() != classes.len() || biases.len() != classes.len() {
            return Err(Error::Dimension(format!(
                "{} classes but weights {}x{} and {} biases",
                classes.len(),
                weights.nrows(),
                weights.ncols(),
                biases.len()
            )));
        }
        if weights.iter().chain(biases.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "probe parameters must be finite".into(),
            ));
        }
        Ok(Self {
            weights,
            biases,
            classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Per-class sigmoid scores, `examples × classes`.
    pub fn predict(&self, features: &DMatrix<T>) -> Result<DMatrix<T>> {
        if features.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "features have {} columns, probe expects {}",
                features.ncols(),
                self.dim()
            )));
        }
        let mut scores = features * self.weights.transpose();
        for mut row in scores.row_iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = sigmoid(*v + self.biases[c]);
            }
        }
        Ok(scores)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassWarning {
    pub class: String,
    pub reason: String,
}

/// Per-class loss trajectory (`epochs + 1` entries, initial loss first) and
/// classes that could not be trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport<T> {
    pub losses: Vec<Vec<T>>,
    pub warnings: Vec<ClassWarning>,
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(z: T) -> T {
    let m = if z > T::zero() { z } else { T::zero() };
    m + (T::one() + (-z.abs()).exp()).ln()
}

/// Mean logistic loss plus `l2/2 · ‖w‖²`, with its gradient in `w` and `b`.
pub fn loss_and_gradient<T: Scalar>(
    features: &DMatrix<T>,
    targets: &[bool],
    weights: &DVector<T>,
    bias: T,
    l2: T,
) -> (T, DVector<T>, T) {
    let m = T::from_usize_lossy(features.nrows());
    let logits = features * weights;
    let mut loss = T::zero();
    let mut residual = DVector::zeros(logits.len());
    for (i, (&z, &y)) in logits.iter().zip(targets).enumerate() {
        let z = z + bias;
        let y = if y { T::one() } else { T::zero() };
        loss += softplus(z) - y * z;
        residual[i] = sigmoid(z) - y;
    }
    let half = T::lit(0.5);
    loss = loss / m + half * l2 * weights.norm_squared();
    let grad_w = features.tr_mul(&residual) / m + weights * l2;
    let grad_b = residual.sum() / m;
    (loss, grad_w, grad_b)
}

struct Standardizer<T: Scalar> {
    mean: DVector<T>,
    scale: DVector<T>,
}

impl<T: Scalar> Standardizer<T> {
    fn fit(x: &DMatrix<T>) -> (Self, DMatrix<T>) {
        let (m, d) = x.shape();
        let mean = x.row_mean().transpose();
        let mut z = x.clone();
        let mut scale = DVector::from_element(d, T::one());
        let tiny = T::default_epsilon().sqrt();
        for j in 0..d {
            let mut col = z.column_mut(j);
            col.add_scalar_mut(-mean[j]);
            let sd = (col.norm_squared() / T::from_usize_lossy(m)).sqrt();
            if sd > tiny {
                col /= sd;
                scale[j] = sd;
            }
        }
        let spectral = Self::largest_eigenvalue(&z);
        if spectral > tiny {
            let g = spectral.sqrt();
            z /= g;
            scale *= g;
        }
        (Self { mean, scale }, z)
    }

    /// Largest eigenvalue of `zᵀz / m` by power iteration.
    fn largest_eigenvalue(z: &DMatrix<T>) -> T {
        let (m, d) = z.shape();
        if d == 0 || m == 0 {
            return T::zero();
        }
        let mut v = DVector::from_fn(d, |j, _| {
            T::one() + T::from_usize_lossy(j % 7) * T::lit(0.1)
        });
        v /= v.norm();
        let mut lambda = T::zero();
        for _ in 0..300 {
            let w = z.tr_mul(&(z * &v)) / T::from_usize_lossy(m);
            let next = w.norm();
            if next <= T::zero() {
                return T::zero();
            }
            v = w / next;
            let done = (next - lambda).abs() <= T::lit(1e-10) * next;
            lambda = next;
            if done {
                break;
            }
        }
        lambda
    }
}

/// Trains one logistic regression per class.
pub fn train_probe<T: Scalar>(
    features: &DMatrix<T>,
    labels: &LabelMatrix,
    params: &ProbeParams,
) -> Result<(ProbeModel<T>, TrainingReport<T>)> {
    if features.nrows() != labels.rows() {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} label rows",
            features.nrows(),
            labels.rows()
        )));
    }
    if features.nrows() == 0 {
        return Err(Error::InsufficientData("no training examples".into()));
    }
    if !(params.lr > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be positive, got {}",
            params.lr
        )));
    }
    if !(params.l2 >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "l2 must be non-negative, got {}",
            params.l2
        )));
    }
    let (norm, z) = Standardizer::fit(features);
    let (lr, l2) = (T::lit(params.lr), T::lit(params.l2));
    let d = features.ncols();

    type Fit<T> = Option<(DVector<T>, T, Vec<T>)>;
    let fitted: Vec<Fit<T>> = (0..labels.classes().len())
        .into_par_iter()
        .map(|c| {
            let y = labels.column(c);
            if !y.iter().any(|&v| v) {
                return None;
            }
            let mut w = DVector::zeros(d);
            let mut b = T::zero();
            let mut losses = Vec::with_capacity(params.epochs + 1);
            for _ in 0..params.epochs {
                let (loss, gw, gb) = loss_and_gradient(&z, &y, &w, b, l2);
                losses.push(loss);
                w -= gw * lr;
                b -= gb * lr;
            }
            losses.push(loss_and_gradient(&z, &y, &w, b, l2).0);
            Some((w, b, losses))
        })
        .collect();

    let classes = labels.classes().to_vec();
    let mut weights = DMatrix::zeros(classes.len(), d);
    let mut biases = DVector::zeros(classes.len());
    let mut report = TrainingReport {
        losses: Vec::with_capacity(classes.len()),
        warnings: Vec::new(),
    };
    for (c, fit) in fitted.into_iter().enumerate() {
        match fit {
            Some((w, b, losses)) => {
                let raw = w.component_div(&norm.scale);
                biases[c] = b - raw.dot(&norm.mean);
                weights.row_mut(c).copy_from(&raw.transpose());
                report.losses.push(losses);
            }
            None => {
                report.losses.push(Vec::new());
                report.warnings.push(ClassWarning {
                    class: classes[c].clone(),
                    reason: "no positive examples; class skipped".into(),
                });
            }
        }
    }
    let model = ProbeModel::new(weights, biases, classes)?;
    Ok((model, report))
}

/// Free-function form of [`ProbeModel::predict`].
pub fn predict<T: Scalar>(probe: &ProbeModel<T>, features: &DMatrix<T>) -> Result<DMatrix<T>> {
    probe.predict(features)
}
