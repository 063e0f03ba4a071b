//! Cubic B-spline free-form deformation of 2D images.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;
use crate::scalar::Real;

/// Uniform cubic B-spline basis values at fractional position `t ∈ [0, 1)`.
#[inline]
pub fn basis(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [s * s * s / 6.0, (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0, (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0, t3 / 6.0]
}

/// Displacement field `u(x)` interpolated from a control lattice. Control
/// point `(i, j)` sits at pixel position `((i - 1) s, (j - 1) s)`, so the
/// lattice covers the image with one extra cell on each side. Sampling maps
/// output pixel `x` to input position `x + u(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BSplineTransform {
    /// Image the lattice was built for, (width, height).
    pub image_dims: [usize; 2],
    /// Control points along x and y.
    pub lattice: [usize; 2],
    /// Lattice spacing in pixels.
    pub spacing: f64,
    /// Control displacements `[dx, dy]` in pixels, row-major (x fastest).
    pub displacements: Vec<[f64; 2]>,
}

/// Control points and weights influencing one sample.
#[derive(Clone, Copy, Debug)]
pub struct Support {
    pub ix: usize,
    pub iy: usize,
    pub wx: [f64; 4],
    pub wy: [f64; 4],
}

impl BSplineTransform {
    pub fn identity(width: usize, height: usize, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) || width == 0 || height == 0 {
            return Err(Error::Parameter(format!("lattice spacing {spacing} on {width}x{height} image")));
        }
        let nx = ((width - 1) as f64 / spacing).floor() as usize + 4;
        let ny = ((height - 1) as f64 / spacing).floor() as usize + 4;
        Ok(Self { image_dims: [width, height], lattice: [nx, ny], spacing, displacements: vec![[0.0, 0.0]; nx * ny] })
    }

    /// Every control point displaced by the same vector; the field is then
    /// that constant vector everywhere.
    pub fn translation(width: usize, height: usize, spacing: f64, shift: [f64; 2]) -> Result<Self> {
        let mut t = Self::identity(width, height, spacing)?;
        t.displacements.iter_mut().for_each(|d| *d = shift);
        Ok(t)
    }

    /// Random warp whose control displacements are drawn uniformly from the
    /// disc of radius `bound`. B-spline weights are a partition of unity, so
    /// the field magnitude never exceeds `bound`.
    pub fn random(width: usize, height: usize, spacing: f64, bound: f64, rng: &mut Rng) -> Result<Self> {
        let mut t = Self::identity(width, height, spacing)?;
        for d in &mut t.displacements {
            let r = bound * rng.random_range(0.0..1.0f64).sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            *d = [r * a.cos(), r * a.sin()];
        }
        Ok(t)
    }

    pub fn n_params(&self) -> usize {
        self.displacements.len() * 2
    }

    #[inline]
    pub fn support(&self, x: f64, y: f64) -> Support {
        let [w, h] = self.image_dims;
        let cx = x.clamp(0.0, (w - 1) as f64) / self.spacing;
        let cy = y.clamp(0.0, (h - 1) as f64) / self.spacing;
        let ix = (cx.floor() as usize).min(self.lattice[0] - 4);
        let iy = (cy.floor() as usize).min(self.lattice[1] - 4);
        Support { ix, iy, wx: basis(cx - ix as f64), wy: basis(cy - iy as f64) }
    }

    #[inline]
    pub fn displacement(&self, x: f64, y: f64) -> [f64; 2] {
        let s = self.support(x, y);
        let nx = self.lattice[0];
        let mut u = [0.0, 0.0];
        for b in 0..4 {
            for a in 0..4 {
                let w = s.wx[a] * s.wy[b];
                let d = self.displacements[(s.iy + b) * nx + s.ix + a];
                u[0] += w * d[0];
                u[1] += w * d[1];
            }
        }
        u
    }

    /// Largest displacement magnitude over the pixel centres.
    pub fn max_norm(&self) -> f64 {
        let [w, h] = self.image_dims;
        let mut m: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let u = self.displacement(x as f64, y as f64);
                m = m.max(u[0].hypot(u[1]));
            }
        }
        m
    }

    /// Point `y` with `y + u(y) = x`, by fixed-point iteration.
    pub fn invert_point(&self, x: [f64; 2]) -> [f64; 2] {
        let mut y = x;
        for _ in 0..100 {
            let u = self.displacement(y[0], y[1]);
            let next = [x[0] - u[0], x[1] - u[1]];
            let delta = (next[0] - y[0]).hypot(next[1] - y[1]);
            y = next;
            if delta < 1e-12 {
                break;
            }
        }
        y
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Warps an image: `out(x) = image(x + u(x))`, bilinear, zero outside.
pub fn apply_transform<T: Real>(image: &Image<T>, t: &BSplineTransform) -> Image<T> {
    Image::from_fn(image.width, image.height, |x, y| {
        let u = t.displacement(x as f64, y as f64);
        image.sample_bilinear(T::lit(x as f64 + u[0]), T::lit(y as f64 + u[1]))
    })
}

/// Nearest-neighbour variant for label-like or angular channels.
pub fn apply_transform_nearest<T: Real>(image: &Image<T>, t: &BSplineTransform) -> Image<T> {
    Image::from_fn(image.width, image.height, |x, y| {
        let u = t.displacement(x as f64, y as f64);
        image.sample_nearest(T::lit(x as f64 + u[0]), T::lit(y as f64 + u[1])).unwrap_or_else(T::zero)
    })
}
