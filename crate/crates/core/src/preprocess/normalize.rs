//! Intensity standardization and denoising gain.

use crate::image::Image;
use crate::scalar::Real;

/// Returned in place of +∞ when the denoised image matches the clean one.
pub const SNR_CAP_DB: f64 = 99.0;

/// Z-scored image using the population standard deviation. A constant
/// input yields zeros and `degenerate = true`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZScore<T> {
    pub image: Image<T>,
    pub mean: f64,
    pub std: f64,
    pub degenerate: bool,
}

pub fn zscore_normalize<T: Real>(image: &Image<T>) -> ZScore<T> {
    let n = image.data.len().max(1) as f64;
    let mean = image.data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = image.data.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return ZScore { image: Image::new(image.width, image.height), mean, std: 0.0, degenerate: true };
    }
    ZScore { image: image.map(|v| T::lit((v.as_f64() - mean) / std)), mean, std, degenerate: false }
}

fn residual_power<T: Real>(a: &Image<T>, b: &Image<T>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum()
}

/// SNR improvement in dB of `denoised` over `noisy`, both measured against
/// `clean`. Panics if the dims differ.
pub fn snr_gain<T: Real>(clean: &Image<T>, noisy: &Image<T>, denoised: &Image<T>) -> f64 {
    assert!(clean.same_dims(noisy) && clean.same_dims(denoised), "snr_gain: image dims differ");
    let noisy_err = residual_power(noisy, clean);
    let denoised_err = residual_power(denoised, clean);
    if denoised_err == 0.0 {
        return SNR_CAP_DB;
    }
    if noisy_err == 0.0 {
        return -SNR_CAP_DB;
    }
    // signal power cancels in the difference of the two SNRs
    (10.0 * (noisy_err / denoised_err).log10()).min(SNR_CAP_DB)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_zscores() {
        let img = Image::<f64>::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let z = zscore_normalize(&img);
        let e = 1.5f64.sqrt();
        assert!((z.image.data[0] + e).abs() < 1e-12);
        assert_eq!(z.image.data[1], 0.0);
        assert!((z.image.data[2] - e).abs() < 1e-12);
        assert!(!z.degenerate);
    }

    #[test]
    fn constant_is_degenerate() {
        let z = zscore_normalize(&Image::<f32>::filled(4, 4, 3.0));
        assert!(z.degenerate);
        assert!(z.image.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn snr_cases() {
        let clean = Image::<f64>::from_fn(8, 8, |x, y| (x * y) as f64);
        let noisy = clean.map(|v| v + 1.0);
        assert_eq!(snr_gain(&clean, &noisy, &noisy), 0.0);
        assert_eq!(snr_gain(&clean, &noisy, &clean), SNR_CAP_DB);
        let half = clean.map(|v| v + 0.5f64.sqrt());
        assert!((snr_gain(&clean, &noisy, &half) - 10.0 * 2f64.log10()).abs() < 1e-9);
    }
}
