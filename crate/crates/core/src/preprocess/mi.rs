//! Mutual information estimators.

use crate::image::Image;
use crate::scalar::Real;

fn bin_indices<T: Real>(img: &Image<T>, bins: usize) -> Vec<usize> {
    let (lo, hi) = img.min_max();
    let (lo, hi) = (lo.as_f64(), hi.as_f64());
    let range = hi - lo;
    img.data
        .iter()
        .map(|v| if !(range > 0.0) { 0 } else { (((v.as_f64() - lo) / range * bins as f64) as usize).min(bins - 1) })
        .collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Histogram MI in nats, `H(A) + H(B) - H(A,B)`, over min-max normalized
/// intensities. Panics if dims differ or `bins < 2`.
pub fn mutual_information<T: Real>(a: &Image<T>, b: &Image<T>, bins: usize) -> f64 {
    assert!(a.same_dims(b), "mutual_information: image dims differ");
    assert!(bins >= 2, "mutual_information: need at least two bins");
    let ia = bin_indices(a, bins);
    let ib = bin_indices(b, bins);
    let n = ia.len() as f64;
    let mut joint = vec![0.0; bins * bins];
    for (&x, &y) in ia.iter().zip(&ib) {
        joint[x * bins + y] += 1.0;
    }
    joint.iter_mut().for_each(|v| *v /= n);
    let pa: Vec<f64> = (0..bins).map(|x| joint[x * bins..(x + 1) * bins].iter().sum()).collect();
    let pb: Vec<f64> = (0..bins).map(|y| (0..bins).map(|x| joint[x * bins + y]).sum()).collect();
    (entropy(&pa) + entropy(&pb) - entropy(&joint)).max(0.0)
}

/// Histogram entropy of one image in nats.
pub fn image_entropy<T: Real>(a: &Image<T>, bins: usize) -> f64 {
    let mut h = vec![0.0; bins];
    let idx = bin_indices(a, bins);
    for &i in &idx {
        h[i] += 1.0;
    }
    h.iter_mut().for_each(|v| *v /= idx.len() as f64);
    entropy(&h)
}

/// Cubic B-spline kernel.
#[inline]
pub fn cubic(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let s = 2.0 - a;
        s * s * s / 6.0
    } else {
        0.0
    }
}

#[inline]
pub fn cubic_deriv(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        -2.0 * t + 1.5 * t * a
    } else if a < 2.0 {
        let s = 2.0 - a;
        -t.signum() * 0.5 * s * s
    } else {
        0.0
    }
}

/// Intensity-to-bin mapping for the Parzen estimator. Intensities in
/// `[lo, hi]` land on `[PAD, bins - 1 - PAD]` so the kernel support stays
/// inside the histogram.
#[derive(Clone, Copy, Debug)]
pub struct BinMap {
    pub lo: f64,
    pub width: f64,
    pub bins: usize,
}

impl BinMap {
    const PAD: f64 = 2.0;

    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        let usable = (bins as f64 - 1.0 - 2.0 * Self::PAD).max(1.0);
        let width = if hi > lo { (hi - lo) / usable } else { 1.0 };
        Self { lo, width, bins }
    }

    pub fn for_image<T: Real>(img: &Image<T>, bins: usize) -> Self {
        let (lo, hi) = img.min_max();
        Self::new(lo.as_f64(), hi.as_f64(), bins)
    }

    /// Continuous bin position and whether it was clamped.
    #[inline]
    pub fn position(&self, v: f64) -> (f64, bool) {
        let p = (v - self.lo) / self.width + Self::PAD;
        let max = self.bins as f64 - 1.0 - Self::PAD;
        if p < Self::PAD {
            (Self::PAD, true)
        } else if p > max {
            (max, true)
        } else {
            (p, false)
        }
    }
}

/// Joint Parzen histogram with cubic B-spline windows on both axes.
pub struct ParzenHistogram {
    pub bins: usize,
    /// Row-major `[fixed_bin][moving_bin]`, sums to one.
    pub joint: Vec<f64>,
    pub fixed: Vec<f64>,
    pub moving: Vec<f64>,
}

/// Bin range `[k0, k0 + 4)` touched by the kernel around `pos`.
#[inline]
pub fn kernel_window(pos: f64) -> usize {
    (pos.floor() as i64 - 1).max(0) as usize
}

impl ParzenHistogram {
    /// Builds from paired bin positions (fixed, moving).
    pub fn from_positions(bins: usize, pairs: &[(f64, f64)]) -> Self {
        let mut joint = vec![0.0; bins * bins];
        let alpha = 1.0 / pairs.len().max(1) as f64;
        for &(pf, pm) in pairs {
            let f0 = kernel_window(pf);
            let m0 = kernel_window(pm);
            for i in f0..(f0 + 4).min(bins) {
                let wf = cubic(i as f64 - pf);
                if wf == 0.0 {
                    continue;
                }
                for k in m0..(m0 + 4).min(bins) {
                    joint[i * bins + k] += alpha * wf * cubic(k as f64 - pm);
                }
            }
        }
        let fixed = (0..bins).map(|i| joint[i * bins..(i + 1) * bins].iter().sum()).collect();
        let moving = (0..bins).map(|k| (0..bins).map(|i| joint[i * bins + k]).sum()).collect();
        Self { bins, joint, fixed, moving }
    }

    pub fn mutual_information(&self) -> f64 {
        let b = self.bins;
        let mut mi = 0.0;
        for i in 0..b {
            for k in 0..b {
                let p = self.joint[i * b + k];
                if p > 0.0 {
                    mi += p * (p / (self.fixed[i] * self.moving[k])).ln();
                }
            }
        }
        mi
    }

    /// `log(p(i,k) / p_m(k))`, the weight that turns joint-histogram
    /// derivatives into MI derivatives.
    pub fn log_ratio(&self) -> Vec<f64> {
        let b = self.bins;
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for k in 0..b {
                let p = self.joint[i * b + k];
                if p > 0.0 && self.moving[k] > 0.0 {
                    out[i * b + k] = (p / self.moving[k]).ln();
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn self_information_is_entropy() {
        let a = Image::<f64>::from_fn(40, 30, |x, y| ((x * 13 + y * 7) % 23) as f64);
        let mi = mutual_information(&a, &a, 32);
        assert!((mi - image_entropy(&a, 32)).abs() < 1e-9);
    }

    #[test]
    fn constant_partner_gives_zero() {
        let a = Image::<f64>::from_fn(20, 20, |x, y| (x + y) as f64);
        let b = Image::<f64>::filled(20, 20, 3.0);
        assert_eq!(mutual_information(&a, &b, 32), 0.0);
    }

    #[test]
    fn independent_noise_is_small() {
        let mut r = rng::rng(3);
        let mut noise =
            || Image::from_vec(100, 100, (0..10_000).map(|_| r.random_range(0.0..1.0f64)).collect()).unwrap();
        let a = noise();
        let b = noise();
        assert!(mutual_information(&a, &b, 32) < 0.08);
    }

    #[test]
    fn parzen_kernel_sums_to_one() {
        for s in 0..10 {
            let pos = 5.0 + s as f64 * 0.1;
            let k0 = kernel_window(pos);
            let total: f64 = (k0..k0 + 4).map(|k| cubic(k as f64 - pos)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let h = 1e-6;
        for &t in &[-1.7, -0.4, 0.3, 1.2] {
            let fd = (cubic(t + h) - cubic(t - h)) / (2.0 * h);
            assert!((fd - cubic_deriv(t)).abs() < 1e-8);
        }
    }
}
