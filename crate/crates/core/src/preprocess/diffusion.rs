//! Perona–Malik anisotropic diffusion.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Real;

/// Explicit 4-neighbour Perona–Malik scheme in flux form with conduction
/// `g(d) = exp(-(d/kappa)^2)` and zero flux across the image border. Each
/// interior edge flux is added to one pixel and subtracted from the other,
/// so total intensity is conserved up to rounding.
pub fn anisotropic_diffusion<T: Real>(
    image: &Image<T>,
    iterations: usize,
    kappa: f64,
    lambda: f64,
) -> Result<Image<T>> {
    if !(lambda > 0.0 && lambda <= 0.25) {
        return Err(Error::Parameter(format!("lambda must lie in (0, 0.25], got {lambda}")));
    }
    if !(kappa > 0.0) {
        return Err(Error::Parameter(format!("kappa must be positive, got {kappa}")));
    }
    let (w, h) = (image.width, image.height);
    let mut cur: Vec<f64> = image.data.iter().map(|v| v.as_f64()).collect();
    let mut delta = vec![0.0; cur.len()];
    let g = |d: f64| (-(d / kappa) * (d / kappa)).exp();
    for _ in 0..iterations {
        delta.iter_mut().for_each(|d| *d = 0.0);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = cur[i + 1] - cur[i];
                    let f = lambda * g(d) * d;
                    delta[i] += f;
                    delta[i + 1] -= f;
                }
                if y + 1 < h {
                    let d = cur[i + w] - cur[i];
                    let f = lambda * g(d) * d;
                    delta[i] += f;
                    delta[i + w] -= f;
                }
            }
        }
        for (c, d) in cur.iter_mut().zip(&delta) {
            *c += d;
        }
    }
    Ok(Image { width: w, height: h, data: cur.into_iter().map(T::lit).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unstable_lambda() {
        let img = Image::<f64>::filled(4, 4, 1.0);
        assert!(matches!(anisotropic_diffusion(&img, 1, 1.0, 0.3), Err(Error::Parameter(_))));
        assert!(anisotropic_diffusion(&img, 1, 1.0, 0.0).is_err());
    }

    #[test]
    fn constant_is_fixed_point() {
        let img = Image::<f64>::filled(6, 5, 2.5);
        assert_eq!(anisotropic_diffusion(&img, 30, 0.1, 0.25).unwrap(), img);
    }

    #[test]
    fn conserves_intensity() {
        let img = Image::<f64>::from_fn(17, 13, |x, y| 1.0 + ((x * 7 + y * 3) % 5) as f64);
        let out = anisotropic_diffusion(&img, 25, 0.8, 0.2).unwrap();
        let (a, b) = (img.sum(), out.sum());
        assert!((a - b).abs() / a < 1e-6);
    }
}
