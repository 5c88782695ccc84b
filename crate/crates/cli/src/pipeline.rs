//! Encoder training and feature assembly shared by the commands.

use anyhow::{bail, Result};
use nalgebra::DMatrix;
use pixelhop::{
    fit_reducer, train_tree, ChannelId, ChannelMaps, ChannelStatus, FeatureBlockF64, HopConfig,
    HopModelF64, ImageF64,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::text::hash_text_features;

/// Requested PCA components per output channel; clamped to the map size and
/// the number of training images.
pub const DEFAULT_COMPONENTS: usize = 4;
/// Width of each visual feature vector.
pub const DEFAULT_TARGET_DIM: usize = 2048;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// A trained channel tree together with its PCA-and-concatenation block.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub hop: HopModelF64,
    pub block: FeatureBlockF64,
}

impl Encoder {
    pub fn train(
        images: &[ImageF64],
        config: &HopConfig,
        components: usize,
        target_dim: usize,
    ) -> Result<Self> {
        let hop = train_tree(images, config)?;
        let maps = infer_all(&hop, images)?;
        let (rows, cols) = hop.geometry().last().expect("validated levels").pooled;
        let p = components.min(rows * cols).min(images.len());
        let block = fit_reducer(&maps, p, target_dim)?;
        Ok(Self { hop, block })
    }

    /// Flattened `Q × D` feature vector of one image.
    pub fn encode(&self, image: &ImageF64) -> Result<Vec<f64>> {
        let maps = self.hop.infer(image)?;
        Ok(self.block.reduce(&maps)?.as_flat().to_vec())
    }

    /// One row per image.
    pub fn encode_all(&self, images: &[ImageF64]) -> Result<DMatrix<f64>> {
        let rows: Vec<Vec<f64>> = images
            .par_iter()
            .map(|im| self.encode(im))
            .collect::<Result<_>>()?;
        let dim = self.feature_dim();
        Ok(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
    }

    pub fn feature_dim(&self) -> usize {
        self.block.vector_count() * self.block.target_dim()
    }
}

pub fn infer_all(hop: &HopModelF64, images: &[ImageF64]) -> Result<Vec<ChannelMaps<f64>>> {
    Ok(images
        .par_iter()
        .map(|im| hop.infer(im))
        .collect::<Result<_, _>>()?)
}

/// The output channel with the largest energy whose path leaves the pure
/// DC chain.
pub fn strongest_ac_output(hop: &HopModelF64) -> Option<ChannelId> {
    hop.nodes()
        .iter()
        .filter(|n| n.status == ChannelStatus::Output && !n.id.is_pure_dc())
        .fold(None, |best: Option<(&ChannelId, f64)>, n| match best {
            Some((_, e)) if e >= n.energy => best,
            _ => Some((&n.id, n.energy)),
        })
        .map(|(id, _)| id.clone())
}

/// Seeded shuffle split into sorted `(train, test)` index lists.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        bail!("test fraction must lie in [0, 1), got {test_fraction}");
    }
    let test_len = (n as f64 * test_fraction).round() as usize;
    if test_len >= n {
        bail!("test fraction {test_fraction} leaves no training rows out of {n}");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = order[..test_len].to_vec();
    let mut train = order[test_len..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

pub fn text_matrix(texts: &[String], buckets: usize) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = texts
        .iter()
        .map(|t| hash_text_features(t, buckets))
        .collect();
    DMatrix::from_fn(rows.len(), buckets, |i, j| rows[i][j])
}

/// `[a | b]`.
pub fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}
