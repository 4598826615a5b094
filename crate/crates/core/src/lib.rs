//! Dynamic implicit image function (DIIF) decoding.
//!
//! Output coordinates are grouped around their nearest latent code, each
//! group is cut into slices, and a coarse-to-fine MLP decodes a slice with
//! one coarse forward per group vertex and one light fine forward per pixel.
//!
//! | module | contents |
//! |---|---|
//! | [`numerics`] | matrices, MLPs with backward passes, Adam |
//! | [`geometry`] | coordinate grids, grouping, slicing plans |
//! | [`decoder`] | C2F-MLP with slice ensemble, per-pixel reference decoder |
//! | [`encoder`] | unfold encoder, feature and weight file formats |
//! | [`costmodel`] | MAC accounting, timing, scaling fits |
//! | [`golden`] | reader for externally generated test vectors |
//! | [`instrument`] | multiply-counting scalar |
//! | [`pipeline`] | images, bicubic resampling, PSNR, training, upscaling |
//! | [`verify`] | runtime self-checks behind `diif verify` |

// `!(x > 0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod costmodel;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod golden;
pub mod instrument;
pub mod numerics;
pub mod pipeline;
pub mod verify;

pub use costmodel::{count_macs, fit_scaling_exponent, CostReport, ScalingFit};
pub use decoder::{
    decode_image, decode_image_sequential, decode_reference_per_pixel, Architecture, DecoderWeights,
    ReferenceArchitecture, ReferenceWeights,
};
pub use encoder::{load_feature_map, load_weights, save_weights, unfold_encode, FeatureMap};
pub use error::{Error, Result};
pub use geometry::{group_coordinates, make_grid, CoordGrid, Group, GroupPlan, Grouping, Slice, SliceStrategy};
pub use numerics::{Matrix, Mlp, Real};
pub use pipeline::{bicubic_resample, psnr, train, upscale, weight_init, Image, TrainConfig};
