//! Successive-subspace image encoder (Saab / PixelHop++), the
//! PCA-and-concatenation feature block, a multi-label logistic probe and
//! rank-based AUC evaluation.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! `*F64` / `*F32` aliases below pin the common instantiations.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod features;
pub mod hop;
pub mod metrics;
pub mod probe;
pub mod saab;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use features::{
    fit_reducer, reduce_concat, render_heatmap, ChannelMaps, ChannelReducer, FeatureBlock,
    VisualFeatures,
};
pub use hop::{
    infer_tree, level_geometry, max_pool, train_tree, ChannelId, ChannelNode, ChannelStatus,
    HopConfig, HopModel, HopUnit, LevelGeometry,
};
pub use metrics::{auc, evaluate, evaluate_scores, roc_curve, ClassAuc, EvalReport};
pub use probe::{
    loss_and_gradient, predict, train_probe, LabelMatrix, ProbeModel, ProbeParams, TrainingReport,
};
pub use saab::{apply_saab, extract_patches, fit_saab, PatchMatrix, SaabKernels};
pub use scalar::Scalar;
pub use tensor::{ImageTensor, ResponseMap};

pub type ImageF64 = ImageTensor<f64>;
pub type ImageF32 = ImageTensor<f32>;
pub type ResponseMapF64 = ResponseMap<f64>;
pub type SaabKernelsF64 = SaabKernels<f64>;
pub type SaabKernelsF32 = SaabKernels<f32>;
pub type HopModelF64 = HopModel<f64>;
pub type HopModelF32 = HopModel<f32>;
pub type FeatureBlockF64 = FeatureBlock<f64>;
pub type FeatureBlockF32 = FeatureBlock<f32>;
pub type ProbeModelF64 = ProbeModel<f64>;
pub type ProbeModelF32 = ProbeModel<f32>;
