//! Thresholded inference.

use std::time::Instant;

use vascufold_core::srus::SliceStack;
use vascufold_core::volume::{Mask, Volume};
use vascufold_core::Real;

use crate::error::{ModelError, Result};
use crate::network::forward;
use crate::params::ModelParams;

#[derive(Clone, Debug)]
pub struct Reconstruction<T> {
    pub probability: Volume<T>,
    pub mask: Mask,
    pub wall_ms: f64,
}

/// Voxels with probability `>= threshold` are foreground.
pub fn threshold<T: Real>(prob: &Volume<T>, threshold: f64) -> Mask {
    prob.map(|p| (p.as_f64() >= threshold) as u8)
}

pub fn reconstruct<T: Real>(stack: &SliceStack, params: &ModelParams<T>, level: f64) -> Result<Reconstruction<T>> {
    if !(0.0..=1.0).contains(&level) {
        return Err(ModelError::Config(format!("threshold {level} is outside [0, 1]")));
    }
    let start = Instant::now();
    let probability = forward(stack, params)?;
    let mask = threshold(&probability, level);
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    log::info!("inference took {wall_ms:.1} ms for {} voxels", probability.data.len());
    Ok(Reconstruction { probability, mask, wall_ms })
}
