//! Independent reference computations used by the integration and
//! acceptance tests. Nothing here calls into the library's numeric paths.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows × n` Gaussian patches with per-coordinate scales, row-major.
pub fn gaussian_patches(
    rng: &mut ChaCha8Rng,
    rows: usize,
    n: usize,
    anisotropic: bool,
) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    // Random mixing so principal axes are not coordinate-aligned.
    let mix: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let s = if anisotropic {
                        1.6f64.powi(-(i as i32))
                    } else {
                        1.0
                    };
                    s * normal.sample(rng) + if i == j { 1.0 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let offset: f64 = rng.random_range(-2.0..2.0);
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        let z: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        for j in 0..n {
            let v: f64 = (0..n).map(|i| z[i] * mix[i][j]).sum();
            out.push(v + offset);
        }
    }
    out
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues in decreasing order with eigenvectors as rows.
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].partial_cmp(&a[x][x]).unwrap());
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k][i]).collect())
        .collect();
    (values, vectors)
}

/// Covariance of the DC-removed residuals `x - mean(x)·1`, computed
/// directly from the patch rows.
pub fn residual_covariance(patches: &[f64], n: usize) -> Vec<Vec<f64>> {
    let rows = patches.len() / n;
    let residuals: Vec<Vec<f64>> = patches
        .chunks(n)
        .map(|p| {
            let m = p.iter().sum::<f64>() / n as f64;
            p.iter().map(|v| v - m).collect()
        })
        .collect();
    let mean: Vec<f64> = (0..n)
        .map(|j| residuals.iter().map(|r| r[j]).sum::<f64>() / rows as f64)
        .collect();
    let mut cov = vec![vec![0.0; n]; n];
    for r in &residuals {
        for i in 0..n {
            for j in 0..n {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= rows as f64;
        }
    }
    cov
}

/// Top-`k` residual principal directions (rows), sign-normalized so the
/// largest-magnitude entry is positive.
pub fn oracle_ac_kernels(patches: &[f64], n: usize, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (values, mut vectors) = jacobi_eigen(&residual_covariance(patches, n));
    vectors.truncate(k);
    for v in vectors.iter_mut() {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i].abs() > v[best].abs() {
                best = i;
            }
        }
        if v[best] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    (values[..k].to_vec(), vectors)
}

/// Largest principal angle (radians) between the row spaces of two
/// orthonormal row sets, via the sine of the projection residual.
pub fn max_principal_angle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    // Residual of each row of `a` after projecting onto span(b).
    let residual: Vec<Vec<f64>> = a
        .iter()
        .map(|ra| {
            let mut r = ra.clone();
            for rb in b {
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                for (ri, bi) in r.iter_mut().zip(rb) {
                    *ri -= dot * bi;
                }
            }
            r
        })
        .collect();
    // Largest singular value of the residual = sqrt(max eig of R Rᵀ).
    let k = residual.len();
    let gram: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    residual[i]
                        .iter()
                        .zip(&residual[j])
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect()
        })
        .collect();
    let (vals, _) = jacobi_eigen(&gram);
    vals[0].max(0.0).sqrt().min(1.0).asin()
}

/// Exhaustive pair counting: P(score+ > score-) + ½ P(tie).
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Mean logistic loss with `l2/2·‖w‖²`, written out term by term.
pub fn logistic_loss(x: &[Vec<f64>], y: &[bool], w: &[f64], b: f64, l2: f64) -> f64 {
    let m = x.len() as f64;
    let data: f64 = x
        .iter()
        .zip(y)
        .map(|(row, &t)| {
            let z: f64 = row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            if t {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    data / m + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
