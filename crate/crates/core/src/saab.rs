//! A single PixelHop++ unit: patch extraction, closed-form Saab kernel
//! fitting and the affine response `y_k = a_k · x + b`.
//!
//! The DC kernel is the normalized mean filter. AC kernels are the principal
//! directions of the DC-removed residuals, found by eigendecomposing the
//! patch covariance restricted to the orthogonal complement of the DC
//! kernel. Working in that complement keeps every AC kernel orthogonal to DC
//! up to rounding, even when the residual spectrum is degenerate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, ResponseMap};

/// Eigenvalues under this fraction of the largest one are treated as zero.
pub const RELATIVE_EIGEN_FLOOR: f64 = 1e-12;

/// Flattened `w × w × d` patches, one per row, in row-major scan order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix<T: Scalar> {
    data: DMatrix<T>,
    window: usize,
    depth: usize,
    grid: (usize, usize),
}

impl<T: Scalar> PatchMatrix<T> {
    /// Wraps an arbitrary `M × n` matrix. The source grid is recorded as `(M, 1)`.
    pub fn from_matrix(data: DMatrix<T>) -> Self {
        let rows = data.nrows();
        let cols = data.ncols();
        Self {
            data,
            window: 0,
            depth: cols,
            grid: (rows, 1),
        }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<T> {
        &self.data
    }

    /// `(out_h, out_w)` arrangement of the patches.
    pub fn source_grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn row(&self, i: usize) -> Vec<T> {
        self.data.row(i).iter().copied().collect()
    }

    fn retain_every(&mut self, step: usize) {
        if step <= 1 {
            return;
        }
        let keep: Vec<usize> = (0..self.rows()).step_by(step).collect();
        self.data = self.data.select_rows(keep.iter());
        self.grid = (keep.len(), 1);
    }
}

/// Output extent along one axis for valid-only windows.
pub fn valid_extent(input: usize, window: usize, stride: usize) -> Option<usize> {
    if stride == 0 || window == 0 || input < window {
        None
    } else {
        Some((input - window) / stride + 1)
    }
}

fn extract_raw<T: Scalar>(
    data: &[T],
    (height, width, depth): (usize, usize, usize),
    window: usize,
    stride: usize,
) -> Result<PatchMatrix<T>> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be at least 1".into()));
    }
    if window == 0 {
        return Err(Error::InvalidConfig("window must be at least 1".into()));
    }
    let (Some(out_h), Some(out_w)) = (
        valid_extent(height, window, stride),
        valid_extent(width, window, stride),
    ) else {
        return Err(Error::Dimension(format!(
            "window {window}x{window} larger than image {height}x{width}"
        )));
    };
    let n = window * window * depth;
    let mut flat = Vec::with_capacity(out_h * out_w * n);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (top, left) = (oy * stride, ox * stride);
            for dy in 0..window {
                let start = ((top + dy) * width + left) * depth;
                flat.extend_from_slice(&data[start..start + window * depth]);
            }
        }
    }
    Ok(PatchMatrix {
        data: DMatrix::from_row_slice(out_h * out_w, n, &flat),
        window,
        depth,
        grid: (out_h, out_w),
    })
}

/// Slides a `w × w × d` window with stride `s` over the image (no padding).
pub fn extract_patches<T: Scalar>(
    image: &ImageTensor<T>,
    window: usize,
    stride: usize,
) -> Result<PatchMatrix<T>> {
    extract_raw(image.data(), image.shape(), window, stride)
}

/// Same as [`extract_patches`] for a single-channel map.
pub fn extract_map_patches<T: Scalar>(
    map: &ResponseMap<T>,
    window: usize,
    stride: usize,
) -> Result<PatchMatrix<T>> {
    extract_raw(map.data(), (map.rows(), map.cols(), 1), window, stride)
}

/// Learned parameters of one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SaabKernels<T: Scalar> {
    dc_kernel: DVector<T>,
    ac_kernels: DMatrix<T>,
    explained_variance: Vec<T>,
    bias: T,
}

impl<T: Scalar> SaabKernels<T> {
    /// Rebuilds kernels from stored parameters, checking the shape contract.
    pub fn from_parts(
        dc_kernel: DVector<T>,
        ac_kernels: DMatrix<T>,
        explained_variance: Vec<T>,
        bias: T,
    ) -> Result<Self> {
        let n = dc_kernel.len();
        if n == 0 {
            return Err(Error::Dimension(
                "kernel dimensionality must be positive".into(),
            ));
        }
        if ac_kernels.ncols() != n {
            return Err(Error::Dimension(format!(
                "AC kernels have {} columns, DC kernel has {n}",
                ac_kernels.ncols()
            )));
        }
        if ac_kernels.nrows() >= n {
            return Err(Error::Dimension(format!(
                "{} AC kernels exceed n - 1 = {}",
                ac_kernels.nrows(),
                n - 1
            )));
        }
        if explained_variance.len() != ac_kernels.nrows() + 1 {
            return Err(Error::Dimension(format!(
                "expected {} explained-variance entries, got {}",
                ac_kernels.nrows() + 1,
                explained_variance.len()
            )));
        }
        Ok(Self {
            dc_kernel,
            ac_kernels,
            explained_variance,
            bias,
        })
    }

    /// Input dimensionality `n = w·w·d`.
    pub fn n(&self) -> usize {
        self.dc_kernel.len()
    }

    /// Number of AC kernels.
    pub fn k(&self) -> usize {
        self.ac_kernels.nrows()
    }

    pub fn dc_kernel(&self) -> &DVector<T> {
        &self.dc_kernel
    }

    /// One AC kernel per row, in decreasing eigenvalue order.
    pub fn ac_kernels(&self) -> &DMatrix<T> {
        &self.ac_kernels
    }

    /// Energy fractions, DC first.
    pub fn explained_variance(&self) -> &[T] {
        &self.explained_variance
    }

    pub fn bias(&self) -> T {
        self.bias
    }

    /// The shared bias repeated once per kernel (`b_k` for `k = 0..=k`).
    pub fn biases(&self) -> Vec<T> {
        vec![self.bias; self.k() + 1]
    }

    /// DC kernel stacked on top of the AC kernels: a `(k+1) × n` matrix.
    pub fn kernel_stack(&self) -> DMatrix<T> {
        let n = self.n();
        let mut stack = DMatrix::zeros(self.k() + 1, n);
        stack.row_mut(0).copy_from(&self.dc_kernel.transpose());
        if self.k() > 0 {
            stack.rows_mut(1, self.k()).copy_from(&self.ac_kernels);
        }
        stack
    }

    /// Inverts the transform: `x = Gᵀ (y - b)`. Exact only when `k = n - 1`.
    pub fn reconstruct(&self, responses: &[T]) -> Result<Vec<T>> {
        if responses.len() != self.k() + 1 {
            return Err(Error::Dimension(format!(
                "expected {} responses, got {}",
                self.k() + 1,
                responses.len()
            )));
        }
        let centered =
            DVector::from_iterator(responses.len(), responses.iter().map(|&y| y - self.bias));
        Ok((self.kernel_stack().transpose() * centered)
            .iter()
            .copied()
            .collect())
    }
}

/// Sufficient statistics for fitting one unit.
#[derive(Debug, Clone)]
pub(crate) struct PatchMoments<T: Scalar> {
    count: usize,
    mean: DVector<T>,
    scatter: DMatrix<T>,
    max_norm: T,
}

impl<T: Scalar> PatchMoments<T> {
    /// Two-pass moments over patch sets produced on demand by `source(i)`.
    ///
    /// Sources are evaluated in parallel but reduced in index order, so the
    /// result does not depend on scheduling.
    pub(crate) fn collect<F>(sources: usize, max_patches: Option<usize>, source: F) -> Result<Self>
    where
        F: Fn(usize) -> Result<PatchMatrix<T>> + Sync,
    {
        if sources == 0 {
            return Err(Error::InsufficientData("no patch sources".into()));
        }
        let load = |i: usize, step: usize| -> Result<PatchMatrix<T>> {
            let mut p = source(i)?;
            p.retain_every(step);
            Ok(p)
        };
        let step = match max_patches {
            Some(cap) if cap > 0 => {
                let per_source = source(0)?.rows();
                (per_source * sources).div_ceil(cap).max(1)
            }
            _ => 1,
        };

        let firsts: Vec<(usize, DVector<T>, T, usize)> = (0..sources)
            .into_par_iter()
            .map(|i| {
                let p = load(i, step)?;
                let sum = p.data.row_sum().transpose();
                let max_norm =
                    p.data
                        .row_iter()
                        .map(|r| r.norm())
                        .fold(T::zero(), |a, b| if b > a { b } else { a });
                Ok((p.rows(), sum, max_norm, p.cols()))
            })
            .collect::<Result<_>>()?;

        let n = firsts[0].3;
        if firsts.iter().any(|f| f.3 != n) {
            return Err(Error::Dimension(
                "patch sources disagree on dimensionality".into(),
            ));
        }
        let mut count = 0usize;
        let mut sum = DVector::<T>::zeros(n);
        let mut max_norm = T::zero();
        for (c, s, m, _) in &firsts {
            count += c;
            sum += s;
            if *m > max_norm {
                max_norm = *m;
            }
        }
        if count < 2 {
            return Err(Error::InsufficientData(format!(
                "need at least 2 patches to fit a unit, got {count}"
            )));
        }
        let mean = sum / T::from_usize_lossy(count);

        let scatters: Vec<DMatrix<T>> = (0..sources)
            .into_par_iter()
            .map(|i| {
                let mut p = load(i, step)?.data;
                for mut row in p.row_iter_mut() {
                    row -= mean.transpose();
                }
                Ok(p.tr_mul(&p))
            })
            .collect::<Result<_>>()?;
        let mut scatter = DMatrix::<T>::zeros(n, n);
        for s in &scatters {
            scatter += s;
        }
        Ok(Self {
            count,
            mean,
            scatter,
            max_norm,
        })
    }

    pub(crate) fn from_patches(patches: &PatchMatrix<T>) -> Result<Self> {
        Self::collect(1, None, |_| Ok(patches.clone()))
    }

    pub(crate) fn fit(&self, max_kernels: Option<usize>) -> Result<SaabKernels<T>> {
        let n = self.mean.len();
        if let Some(cap) = max_kernels {
            if cap > n - 1 {
                return Err(Error::InvalidConfig(format!(
                    "max_kernels {cap} exceeds n - 1 = {}",
                    n - 1
                )));
            }
        }
        let cap = max_kernels.unwrap_or(n - 1);

        let dc_value = T::one() / T::from_usize_lossy(n).sqrt();
        let dc_kernel = DVector::from_element(n, dc_value);
        let covariance = &self.scatter / T::from_usize_lossy(self.count);
        let total = covariance.trace();
        let scale = total + self.mean.norm_squared();
        let floor = T::variance_floor() * scale;

        let mut ac_kernels = DMatrix::zeros(0, n);
        let mut explained_variance = vec![T::one()];

        if total > floor && n > 1 {
            let dc_var = (covariance.transpose() * &dc_kernel).dot(&dc_kernel);
            explained_variance[0] = dc_var / total;

            let basis = dc_complement_basis(n);
            let reduced = basis.tr_mul(&covariance) * &basis;
            let reduced = (&reduced + reduced.transpose()) * T::lit(0.5);
            let eig = SymmetricEigen::new(reduced);

            let mut order: Vec<usize> = (0..n - 1).collect();
            order.sort_by(|&a, &b| {
                eig.eigenvalues[b]
                    .partial_cmp(&eig.eigenvalues[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let largest = eig.eigenvalues[order[0]];
            let cutoff = {
                let rel = largest * T::lit(RELATIVE_EIGEN_FLOOR);
                if rel > floor {
                    rel
                } else {
                    floor
                }
            };
            let kept: Vec<usize> = order
                .into_iter()
                .take_while(|&j| eig.eigenvalues[j] > cutoff)
                .take(cap)
                .collect();

            ac_kernels = DMatrix::zeros(kept.len(), n);
            for (row, &j) in kept.iter().enumerate() {
                let mut kernel = &basis * eig.eigenvectors.column(j);
                let norm = kernel.norm();
                kernel /= norm;
                normalize_sign(kernel.as_mut_slice());
                ac_kernels.row_mut(row).copy_from(&kernel.transpose());
                explained_variance.push(eig.eigenvalues[j] / total);
            }
        }

        SaabKernels::from_parts(dc_kernel, ac_kernels, explained_variance, self.max_norm)
    }
}

/// Orthonormal basis (as columns) of the complement of the DC direction.
///
/// Built from the Householder reflector that maps `e_0` onto the DC kernel;
/// its remaining columns span the complement.
fn dc_complement_basis<T: Scalar>(n: usize) -> DMatrix<T> {
    let dc = T::one() / T::from_usize_lossy(n).sqrt();
    let mut u = DVector::from_element(n, -dc);
    u[0] += T::one();
    let uu = u.norm_squared();
    let mut basis = DMatrix::zeros(n, n - 1);
    for c in 1..n {
        for r in 0..n {
            let id = if r == c { T::one() } else { T::zero() };
            basis[(r, c - 1)] = id - T::lit(2.0) * u[r] * u[c] / uu;
        }
    }
    basis
}

/// Flips `v` so its largest-magnitude component (first on ties) is positive.
pub fn normalize_sign<T: Scalar>(v: &mut [T]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < T::zero() {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Fits DC and AC kernels to a patch set. `max_kernels` caps the number of
/// AC kernels; `None` keeps every non-degenerate direction.
pub fn fit_saab<T: Scalar>(
    patches: &PatchMatrix<T>,
    max_kernels: Option<usize>,
) -> Result<SaabKernels<T>> {
    if patches.rows() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 patches to fit a unit, got {}",
            patches.rows()
        )));
    }
    PatchMoments::from_patches(patches)?.fit(max_kernels)
}

/// Applies the unit: `M × (k+1)` responses, DC in column 0.
pub fn apply_saab<T: Scalar>(
    kernels: &SaabKernels<T>,
    patches: &PatchMatrix<T>,
) -> Result<DMatrix<T>> {
    if patches.cols() != kernels.n() {
        return Err(Error::Dimension(format!(
            "patches have {} columns, kernels expect {}",
            patches.cols(),
            kernels.n()
        )));
    }
    let mut responses = patches.data() * kernels.kernel_stack().transpose();
    responses.add_scalar_mut(kernels.bias());
    Ok(responses)
}

/// Reshapes one response column back onto the patch grid.
pub fn response_map<T: Scalar>(
    responses: &DMatrix<T>,
    column: usize,
    grid: (usize, usize),
) -> Result<ResponseMap<T>> {
    ResponseMap::new(
        grid.0,
        grid.1,
        responses.column(column).iter().copied().collect(),
    )
}
