//! Core of the vascufold pipeline: phantom networks, SRUS-like slice
//! simulation, preprocessing, centerline quantification and evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod edt;
pub mod error;
pub mod eval;
pub mod geom;
pub mod graph;
pub mod image;
pub mod phantom;
pub mod preprocess;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod sentinel;
pub mod srus;
pub mod volume;

pub use error::{Error, Result};
pub use graph::VascularGraph;
pub use image::Image;
pub use scalar::Real;
pub use srus::{Channel, SliceStack};
pub use volume::{Grid, Mask, Volume};

/// Single-precision image, the storage type of slice channels.
pub type Image32 = Image<f32>;
/// Double-precision image used where filters need headroom.
pub type Image64 = Image<f64>;
/// Probability or intensity volume.
pub type VolumeF32 = Volume<f32>;
