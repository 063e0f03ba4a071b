//! Geometric and intensity augmentation of slice stacks.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::bspline::{apply_transform, apply_transform_nearest, BSplineTransform};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::srus::{Channel, SliceStack};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// In-plane rotation about the image centre, degrees, counterclockwise
    /// in (x, y) pixel coordinates.
    pub rotation_deg: f64,
    /// Std-dev of random control displacements, px.
    pub elastic_sigma: f64,
    pub elastic_spacing: f64,
    /// Isotropic zoom about the image centre.
    pub scale: f64,
    /// Gaussian noise std-dev added to grayscale.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotation_deg: 0.0, elastic_sigma: 0.0, elastic_spacing: 8.0, scale: 1.0, noise_sigma: 0.0, seed: 0 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-180.0..=180.0).contains(&self.rotation_deg) {
            return Err(Error::Parameter("rotation must lie in [-180, 180] degrees".into()));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Parameter("scale must be positive".into()));
        }
        if self.elastic_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Parameter("sigmas must be non-negative".into()));
        }
        if self.elastic_sigma > 0.0 && !(self.elastic_spacing >= 2.0) {
            return Err(Error::Parameter("elastic spacing must be at least 2 px".into()));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.elastic_sigma == 0.0 && self.scale == 1.0 && self.noise_sigma == 0.0
    }
}

/// Similarity warp about the image centre: output pixel `x` reads input
/// position `R(-θ)(x - c)/s + c`.
fn similarity(img: &Image<f32>, theta: f64, scale: f64, nearest: bool) -> Image<f32> {
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    Image::from_fn(img.width, img.height, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = (cos * dx + sin * dy) / scale + cx;
        let sy = (-sin * dx + cos * dy) / scale + cy;
        // snap values that are integral up to rounding so exact rotations stay exact
        let snap = |v: f64| {
            if (v - v.round()).abs() < 1e-9 {
                v.round()
            } else {
                v
            }
        };
        let (sx, sy) = (snap(sx), snap(sy));
        if nearest {
            img.sample_nearest(sx as f32, sy as f32).unwrap_or(0.0)
        } else {
            img.sample_bilinear(sx as f32, sy as f32)
        }
    })
}

fn wrap(a: f64) -> f32 {
    use std::f64::consts::PI;
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w -= 2.0 * PI;
    }
    let w = w as f32;
    // f32 rounding can land exactly on +π
    if w >= std::f32::consts::PI {
        -std::f32::consts::PI
    } else {
        w
    }
}

/// Applies the same rotation, scale and elastic warp to every channel of a
/// slice (nearest-neighbour for discrete channels), shifts flow direction
/// by the rotation angle on foreground pixels, then adds grayscale noise.
pub fn augment(stack: &SliceStack, cfg: &AugmentConfig) -> Result<SliceStack> {
    cfg.validate()?;
    if cfg.is_identity() {
        return Ok(stack.clone());
    }
    let theta = cfg.rotation_deg.to_radians();
    let mut out = stack.clone();
    let density = stack.channel_index(Channel::FlowDensity);
    let noise =
        Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Parameter(e.to_string()))?;
    for (k, slice) in out.slices.iter_mut().enumerate() {
        let mut rng = rng::rng(cfg.seed ^ k as u64);
        let elastic = if cfg.elastic_sigma > 0.0 {
            let mut t = BSplineTransform::identity(stack.width, stack.height, cfg.elastic_spacing)?;
            let n = Normal::new(0.0, cfg.elastic_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
            for d in &mut t.displacements {
                *d = [n.sample(&mut rng), n.sample(&mut rng)];
            }
            Some(t)
        } else {
            None
        };
        for (c, img) in stack.channels.iter().zip(slice.data.iter_mut()) {
            let nearest = c.is_discrete();
            let mut warped =
                if theta != 0.0 || cfg.scale != 1.0 { similarity(img, theta, cfg.scale, nearest) } else { img.clone() };
            if let Some(t) = &elastic {
                warped = if nearest { apply_transform_nearest(&warped, t) } else { apply_transform(&warped, t) };
            }
            *img = warped;
        }
        if theta != 0.0 {
            if let Some(di) = stack.channel_index(Channel::FlowDirection) {
                let fg: Vec<bool> = match density {
                    Some(d) => slice.data[d].data.iter().map(|&v| v > 0.0).collect(),
                    None => slice.data[di].data.iter().map(|&v| v != 0.0).collect(),
                };
                for (v, f) in slice.data[di].data.iter_mut().zip(fg) {
                    *v = if f { wrap(*v as f64 + theta) } else { 0.0 };
                }
            }
        }
        if cfg.noise_sigma > 0.0 {
            if let Some(g) = stack.channel_index(Channel::Grayscale) {
                for v in slice.data[g].data.iter_mut() {
                    *v += noise.sample(&mut rng) as f32;
                }
            }
        }
    }
    Ok(out)
}
