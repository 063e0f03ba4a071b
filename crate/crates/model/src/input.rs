//! Conversion of slice stacks into per-modality patch matrices.

use vascufold_core::srus::SliceStack;
use vascufold_core::volume::Grid;
use vascufold_core::{Channel, Real};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::tensor::Tensor;

/// Network input: one `[n_tokens × patch_len]` matrix per configured
/// channel, in config channel order. Tokens are ordered (slice, row, col)
/// and patch elements likewise.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T> {
    pub patches: Vec<Tensor<T>>,
}

/// Fixed per-channel scale bringing every modality to roughly unit range.
fn channel_scale(c: Channel, stack: &SliceStack) -> f64 {
    match c {
        Channel::FlowDirection => std::f64::consts::FRAC_1_PI,
        Channel::FlowAngle => std::f64::consts::FRAC_2_PI,
        Channel::FlowVelocity => {
            let i = stack.channel_index(c).expect("checked by caller");
            let vmax =
                stack.slices.iter().flat_map(|s| s.data[i].data.iter()).fold(0.0f32, |m, &v| m.max(v.abs())) as f64;
            if vmax > 0.0 {
                1.0 / vmax
            } else {
                1.0
            }
        }
        _ => 1.0,
    }
}

impl<T: Real> ModelInput<T> {
    pub fn from_stack(stack: &SliceStack, cfg: &ModelConfig) -> Result<Self> {
        let [s, h, w] = [stack.len(), stack.height, stack.width];
        const AXES: [&str; 3] = ["slices", "height", "width"];
        for (a, &have) in [s, h, w].iter().enumerate() {
            if have % cfg.patch[a] != 0 {
                return Err(ModelError::Shape(format!(
                    "stack {} {have} is not divisible by patch {}",
                    AXES[a], cfg.patch[a]
                )));
            }
            if have != cfg.input_dims[a] {
                return Err(ModelError::Shape(format!(
                    "stack {} {have} differs from model input {}",
                    AXES[a], cfg.input_dims[a]
                )));
            }
        }
        let [pd, ph, pw] = cfg.patch;
        let [gz, gy, gx] = cfg.token_grid();
        let plen = cfg.patch_len();
        let mut patches = Vec::with_capacity(cfg.channels.len());
        for &c in &cfg.channels {
            let ci =
                stack.channel_index(c).ok_or_else(|| ModelError::Shape(format!("stack lacks channel {}", c.name())))?;
            let scale = channel_scale(c, stack);
            let mut m = Vec::with_capacity(cfg.n_tokens() * plen);
            for tz in 0..gz {
                for ty in 0..gy {
                    for tx in 0..gx {
                        for dz in 0..pd {
                            let img = &stack.slices[tz * pd + dz].data[ci];
                            for dy in 0..ph {
                                for dx in 0..pw {
                                    let v = img.get(tx * pw + dx, ty * ph + dy) as f64;
                                    m.push(T::lit(v * scale));
                                }
                            }
                        }
                    }
                }
            }
            patches.push(Tensor::from_vec(&[cfg.n_tokens(), plen], m)?);
        }
        Ok(Self { patches })
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self { patches: vec![Tensor::zeros(&[cfg.n_tokens(), cfg.patch_len()]); cfg.channels.len()] }
    }
}

/// Voxel grid covered by a stack: in-plane it spans the pixel grid, along
/// the normal it spans the slab of planes with half a spacing on each
/// side. Requires axis-aligned planes along z.
pub fn output_grid(stack: &SliceStack, cfg: &ModelConfig) -> Result<Grid> {
    let first = stack.slices.first().ok_or_else(|| ModelError::Shape("empty slice stack".into()))?;
    if first.pose.normal != [0.0, 0.0, 1.0] {
        return Err(ModelError::Shape("model input planes must be normal to z".into()));
    }
    let dz = match stack.slices.get(1) {
        Some(next) => next.pose.origin[2] - first.pose.origin[2],
        None => stack.pixel_spacing_um * 1e-3,
    };
    if !(dz > 0.0) {
        return Err(ModelError::Shape("slice planes must advance along +z".into()));
    }
    let px = stack.pixel_spacing_um * 1e-3;
    let [nx, ny, nz] = cfg.output_dims;
    let spacing = [
        stack.width as f64 * px / nx as f64,
        stack.height as f64 * px / ny as f64,
        stack.len() as f64 * dz / nz as f64,
    ];
    let mut origin = first.pose.origin;
    origin[2] -= 0.5 * dz;
    Ok(Grid::new(cfg.output_dims, spacing, origin)?)
}
