//! PCA-and-concatenation block: per-channel PCA on flattened output maps,
//! concatenation in a fixed channel order, zero padding and chunking into
//! `Q` vectors of width `D`. Also renders channel maps as grayscale heatmaps.

use image::{GrayImage, Luma};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hop::ChannelId;
use crate::saab::{normalize_sign, RELATIVE_EIGEN_FLOOR};
use crate::scalar::Scalar;
use crate::tensor::ResponseMap;

/// Output maps of one example, in model output order.
pub type ChannelMaps<T> = Vec<(ChannelId, ResponseMap<T>)>;

/// PCA fitted to one output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelReducer<T: Scalar> {
    pub id: ChannelId,
    pub shape: (usize, usize),
    pub mean: DVector<T>,
    /// `components × (rows·cols)`, orthonormal rows.
    pub basis: DMatrix<T>,
}

impl<T: Scalar> ChannelReducer<T> {
    pub fn project(&self, map: &ResponseMap<T>) -> Result<DVector<T>> {
        if map.shape() != self.shape {
            return Err(Error::Schema(format!(
                "channel {} expects {:?} maps, got {:?}",
                self.id,
                self.shape,
                map.shape()
            )));
        }
        let x = DVector::from_column_slice(map.data()) - &self.mean;
        Ok(&self.basis * x)
    }

    pub fn components(&self) -> usize {
        self.basis.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock<T: Scalar> {
    channels: Vec<ChannelReducer<T>>,
    target_dim: usize,
    vector_count: usize,
}

impl<T: Scalar> FeatureBlock<T> {
    pub fn from_parts(channels: Vec<ChannelReducer<T>>, target_dim: usize) -> Result<Self> {
        if target_dim == 0 {
            return Err(Error::InvalidConfig(
                "target dimension D must be positive".into(),
            ));
        }
        if channels.is_empty() {
            return Err(Error::Schema(
                "feature block needs at least one channel".into(),
            ));
        }
        for ch in &channels {
            let len = ch.shape.0 * ch.shape.1;
            if ch.mean.len() != len || ch.basis.ncols() != len {
                return Err(Error::Schema(format!(
                    "channel {} parameters do not match its {:?} shape",
                    ch.id, ch.shape
                )));
            }
        }
        let total: usize = channels.iter().map(|c| c.components()).sum();
        Ok(Self {
            channels,
            target_dim,
            vector_count: total.div_ceil(target_dim).max(1),
        })
    }

    pub fn channels(&self) -> &[ChannelReducer<T>] {
        &self.channels
    }

    /// Width `D` of each feature vector.
    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    /// Number `Q` of feature vectors.
    pub fn vector_count(&self) -> usize {
        self.vector_count
    }

    /// Length of the concatenated projections before padding.
    pub fn feature_len(&self) -> usize {
        self.channels.iter().map(|c| c.components()).sum()
    }

    /// Projects, concatenates and chunks one example's maps.
    pub fn reduce(&self, maps: &[(ChannelId, ResponseMap<T>)]) -> Result<VisualFeatures<T>> {
        let mut data = Vec::with_capacity(self.vector_count * self.target_dim);
        for reducer in &self.channels {
            let map = maps
                .iter()
                .find(|(id, _)| *id == reducer.id)
                .map(|(_, m)| m)
                .ok_or_else(|| Error::Schema(format!("missing channel {}", reducer.id)))?;
            data.extend(reducer.project(map)?.iter().copied());
        }
        data.resize(self.vector_count * self.target_dim, T::zero());
        Ok(VisualFeatures {
            vector_count: self.vector_count,
            dim: self.target_dim,
            data,
        })
    }

    /// Maps features back to channel maps (`mean + basisᵀ · y`).
    pub fn reconstruct(&self, features: &VisualFeatures<T>) -> Result<ChannelMaps<T>> {
        if features.vector_count != self.vector_count || features.dim != self.target_dim {
            return Err(Error::Dimension(format!(
                "features are {}x{}, block produces {}x{}",
                features.vector_count, features.dim, self.vector_count, self.target_dim
            )));
        }
        let mut offset = 0;
        self.channels
            .iter()
            .map(|ch| {
                let p = ch.components();
                let y = DVector::from_column_slice(&features.data[offset..offset + p]);
                offset += p;
                let x = ch.basis.tr_mul(&y) + &ch.mean;
                Ok((
                    ch.id.clone(),
                    ResponseMap::new(ch.shape.0, ch.shape.1, x.as_slice().to_vec())?,
                ))
            })
            .collect()
    }
}

/// `Q × D` feature matrix `V = [v_1 … v_Q]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures<T> {
    vector_count: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> VisualFeatures<T> {
    pub fn vector_count(&self) -> usize {
        self.vector_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// All vectors laid end to end.
    pub fn as_flat(&self) -> &[T] {
        &self.data
    }
}

fn check_schema<T: Scalar>(examples: &[ChannelMaps<T>]) -> Result<()> {
    let first = &examples[0];
    if first.is_empty() {
        return Err(Error::Schema("examples carry no channels".into()));
    }
    for (i, ex) in examples.iter().enumerate().skip(1) {
        if ex.len() != first.len() {
            return Err(Error::Schema(format!(
                "example {i} has {} channels, example 0 has {}",
                ex.len(),
                first.len()
            )));
        }
        for ((id, map), (id0, map0)) in ex.iter().zip(first) {
            if id != id0 || map.shape() != map0.shape() {
                return Err(Error::Schema(format!(
                    "example {i} channel {id} {:?} does not match {id0} {:?}",
                    map.shape(),
                    map0.shape()
                )));
            }
        }
    }
    Ok(())
}

/// Principal axes (rows) of the mean-centred rows of `centered`.
fn principal_axes<T: Scalar>(centered: &DMatrix<T>, components: usize) -> DMatrix<T> {
    let (samples, dim) = centered.shape();
    let descending = |values: &DVector<T>| {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| {
            values[b]
                .partial_cmp(&values[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        order
    };
    let mut basis = DMatrix::zeros(components, dim);

    if dim <= samples {
        let cov = centered.tr_mul(centered);
        let eig = SymmetricEigen::new((&cov + cov.transpose()) * T::lit(0.5));
        for (row, j) in descending(&eig.eigenvalues)
            .into_iter()
            .take(components)
            .enumerate()
        {
            let mut v = eig.eigenvectors.column(j).into_owned();
            normalize_sign(v.as_mut_slice());
            basis.row_mut(row).copy_from(&v.transpose());
        }
        return basis;
    }

    // Fewer samples than dimensions: diagonalize the Gram matrix instead.
    let gram = centered * centered.transpose();
    let eig = SymmetricEigen::new((&gram + gram.transpose()) * T::lit(0.5));
    let order = descending(&eig.eigenvalues);
    let largest = eig.eigenvalues[order[0]];
    let cutoff = largest * T::lit(RELATIVE_EIGEN_FLOOR);
    let mut filled = 0;
    for &j in &order {
        if filled == components || !(eig.eigenvalues[j] > cutoff) || largest <= T::zero() {
            break;
        }
        let mut v = centered.tr_mul(&eig.eigenvectors.column(j).into_owned());
        v /= v.norm();
        normalize_sign(v.as_mut_slice());
        basis.row_mut(filled).copy_from(&v.transpose());
        filled += 1;
    }
    // Zero-variance directions: complete the basis with Gram-Schmidt.
    let mut axis = 0;
    while filled < components && axis < dim {
        let mut v = DVector::zeros(dim);
        v[axis] = T::one();
        axis += 1;
        for _ in 0..2 {
            for r in 0..filled {
                let b = basis.row(r).transpose();
                let proj = b.dot(&v);
                v -= b * proj;
            }
        }
        let norm = v.norm();
        if norm > T::lit(1e-6) {
            v /= norm;
            basis.row_mut(filled).copy_from(&v.transpose());
            filled += 1;
        }
    }
    basis
}

/// Fits one PCA per output channel over the training examples.
pub fn fit_reducer<T: Scalar>(
    examples: &[ChannelMaps<T>],
    components_per_channel: usize,
    target_dim: usize,
) -> Result<FeatureBlock<T>> {
    if examples.is_empty() {
        return Err(Error::InsufficientData("no training examples".into()));
    }
    if components_per_channel == 0 {
        return Err(Error::InvalidConfig(
            "components per channel must be positive".into(),
        ));
    }
    check_schema(examples)?;
    let n = examples.len();
    let channels = (0..examples[0].len())
        .into_par_iter()
        .map(|c| {
            let (id, first) = &examples[0][c];
            let len = first.rows() * first.cols();
            if components_per_channel > len.min(n) {
                return Err(Error::InvalidConfig(format!(
                    "{components_per_channel} components exceed min(map size {len}, examples {n})"
                )));
            }
            let mut data = DMatrix::zeros(n, len);
            for (i, ex) in examples.iter().enumerate() {
                data.row_mut(i).copy_from_slice(ex[c].1.data());
            }
            let mean = data.row_mean().transpose();
            for mut row in data.row_iter_mut() {
                row -= mean.transpose();
            }
            Ok(ChannelReducer {
                id: id.clone(),
                shape: first.shape(),
                mean,
                basis: principal_axes(&data, components_per_channel),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureBlock::from_parts(channels, target_dim)
}

/// Free-function form of [`FeatureBlock::reduce`].
pub fn reduce_concat<T: Scalar>(
    block: &FeatureBlock<T>,
    maps: &[(ChannelId, ResponseMap<T>)],
) -> Result<VisualFeatures<T>> {
    block.reduce(maps)
}

/// Min-max normalizes a map to `0..=255` and upscales it (nearest neighbour)
/// to `height × width`. Constant maps render as uniform 128.
pub fn render_heatmap<T: Scalar>(map: &ResponseMap<T>, height: usize, width: usize) -> GrayImage {
    let (lo, hi) = map.min_max();
    let (lo, hi) = (lo.to_f64_lossy(), hi.to_f64_lossy());
    let span = hi - lo;
    let level = |v: T| -> u8 {
        if !(span > 0.0) {
            128
        } else {
            ((v.to_f64_lossy() - lo) / span * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8
        }
    };
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let r = y as usize * map.rows() / height;
        let c = x as usize * map.cols() / width;
        Luma([level(map.get(r, c))])
    })
}
