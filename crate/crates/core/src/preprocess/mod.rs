//! Denoising, normalization, registration and augmentation of slices.

pub mod augment;
pub mod bspline;
pub mod diffusion;
pub mod median;
pub mod mi;
pub mod normalize;
pub mod register;

pub use augment::{augment, AugmentConfig};
pub use bspline::{apply_transform, BSplineTransform};
pub use diffusion::anisotropic_diffusion;
pub use median::adaptive_median_filter;
pub use mi::mutual_information;
pub use normalize::{snr_gain, zscore_normalize, ZScore};
pub use register::{bspline_register, RegistrationConfig, RegistrationResult};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::srus::{Channel, SliceStack};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub median_max_kernel: usize,
    pub diffusion_iterations: usize,
    pub diffusion_kappa: f64,
    pub diffusion_lambda: f64,
    pub zscore: bool,
    /// Register every slice to its predecessor.
    pub register: bool,
    pub registration: RegistrationConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            median_max_kernel: 3,
            diffusion_iterations: 10,
            diffusion_kappa: 0.1,
            diffusion_lambda: 0.2,
            zscore: true,
            register: false,
            registration: RegistrationConfig::default(),
        }
    }
}

/// Runs the per-slice chain on the grayscale channel: adaptive median,
/// anisotropic diffusion, optional sequential registration (all channels
/// follow the grayscale transform) and z-scoring. Statistics removed by
/// z-scoring are stored in the stack.
pub fn preprocess_stack(stack: &SliceStack, cfg: &PreprocessConfig) -> Result<SliceStack> {
    let mut out = stack.clone();
    let Some(g) = stack.channel_index(Channel::Grayscale) else {
        return Ok(out);
    };
    for slice in out.slices.iter_mut() {
        let img = adaptive_median_filter(&slice.data[g], cfg.median_max_kernel);
        slice.data[g] = if cfg.diffusion_iterations > 0 {
            anisotropic_diffusion(&img, cfg.diffusion_iterations, cfg.diffusion_kappa, cfg.diffusion_lambda)?
        } else {
            img
        };
    }
    if cfg.register {
        for k in 1..out.slices.len() {
            let fixed = out.slices[k - 1].data[g].clone();
            let result = bspline_register(&out.slices[k].data[g], &fixed, &cfg.registration)?;
            for (c, img) in stack.channels.iter().zip(out.slices[k].data.iter_mut()) {
                *img = if c.is_discrete() {
                    bspline::apply_transform_nearest(img, &result.transform)
                } else {
                    apply_transform(img, &result.transform)
                };
            }
        }
    }
    if cfg.zscore {
        for (k, slice) in out.slices.iter_mut().enumerate() {
            let z = zscore_normalize(&slice.data[g]);
            slice.data[g] = z.image;
            out.normalization[k] = Some(crate::srus::Normalization { mean: z.mean, std: z.std });
        }
    }
    Ok(out)
}
