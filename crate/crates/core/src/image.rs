//! Dense 2D images, generic over the scalar type.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major image; pixel `(x, y)` lives at `y * width + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Image<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![T::default(); width * height] }
    }

    pub fn filled(width: usize, height: usize, v: T) -> Self {
        Self { width, height, data: vec![v; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "image {width}x{height} needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel with coordinates clamped into the image (Neumann boundary).
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> T {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.get(x, y)
    }

    pub fn same_dims<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

impl<T: Real> Image<T> {
    /// Bilinear sample with zero padding outside the pixel grid.
    /// Pixel centres are at integer coordinates.
    #[inline]
    pub fn sample_bilinear(&self, x: T, y: T) -> T {
        self.sample_bilinear_grad(x, y).0
    }

    /// Bilinear sample plus its partial derivatives in x and y.
    pub fn sample_bilinear_grad(&self, x: T, y: T) -> (T, T, T) {
        let zero = T::zero();
        let one = T::one();
        let xf = x.floor();
        let yf = y.floor();
        let (Some(x0), Some(y0)) = (xf.to_i64(), yf.to_i64()) else {
            return (zero, zero, zero);
        };
        let fx = x - xf;
        let fy = y - yf;
        let px = |xi: i64, yi: i64| -> T {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                zero
            } else {
                self.data[yi as usize * self.width + xi as usize]
            }
        };
        let v00 = px(x0, y0);
        let v10 = px(x0 + 1, y0);
        let v01 = px(x0, y0 + 1);
        let v11 = px(x0 + 1, y0 + 1);
        let top = v00 + (v10 - v00) * fx;
        let bottom = v01 + (v11 - v01) * fx;
        let value = top + (bottom - top) * fy;
        let dx = (v10 - v00) * (one - fy) + (v11 - v01) * fy;
        let dy = bottom - top;
        (value, dx, dy)
    }

    /// Nearest-neighbour sample; `None` outside the image.
    pub fn sample_nearest(&self, x: T, y: T) -> Option<T> {
        let xi = x.round().to_i64()?;
        let yi = y.round().to_i64()?;
        if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
            None
        } else {
            Some(self.get(xi as usize, yi as usize))
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len().max(1) as f64)
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        self.map(|v| U::lit(v.as_f64()))
    }
}

/// Separable Gaussian blur with clamped borders. `sigma <= 0` is a no-op.
pub fn gaussian_blur<T: Real>(img: &Image<T>, sigma: f64) -> Image<T> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let kernel: Vec<T> = kernel.into_iter().map(T::lit).collect();

    let (w, h) = (img.width, img.height);
    let mut tmp = Image::<T>::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * img.get_clamped(x as i64 + k as i64 - radius, y as i64);
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = Image::<T>::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp.get_clamped(x as i64, y as i64 + k as i64 - radius);
            }
            out.set(x, y, acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_interpolates_and_pads() {
        let img = Image::<f64>::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(img.sample_bilinear(0.5, 0.5), 1.5);
        assert_eq!(img.sample_bilinear(1.0, 1.0), 3.0);
        assert_eq!(img.sample_bilinear(-1.0, 0.0), 0.0);
        let (_, dx, dy) = img.sample_bilinear_grad(0.25, 0.25);
        assert!((dx - 1.0).abs() < 1e-12 && (dy - 2.0).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_constant() {
        let img = Image::<f32>::filled(7, 5, 2.5);
        let b = gaussian_blur(&img, 1.3);
        assert!(b.data.iter().all(|&v| (v - 2.5).abs() < 1e-5));
    }
}
