//! Network hyperparameters and their shape bookkeeping.

use serde::{Deserialize, Serialize};
use vascufold_core::Channel;

use crate::error::{ModelError, Result};

/// Architecture description. Spatial triples named `*_dims` on the input
/// side are (slices, height, width); `output_dims` follows the volume
/// convention (x, y, z).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: Vec<Channel>,
    pub input_dims: [usize; 3],
    pub patch: [usize; 3],
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub pyramid_scales: usize,
    /// Channel count of the fused pyramid features.
    pub fusion_dim: usize,
    /// Output channels of each decoder upsampling block.
    pub decoder_channels: Vec<usize>,
    pub output_dims: [usize; 3],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: Channel::ALL.to_vec(),
            input_dims: [8, 32, 32],
            patch: [2, 4, 4],
            embed_dim: 64,
            heads: 4,
            depth: 4,
            pyramid_scales: 3,
            fusion_dim: 64,
            decoder_channels: vec![32, 16],
            output_dims: [32, 32, 16],
            seed: 0,
        }
    }
}

/// Shape of one token grid: (slices, rows, cols).
pub type GridDims = [usize; 3];

impl ModelConfig {
    pub fn token_grid(&self) -> GridDims {
        [0, 1, 2].map(|a| self.input_dims[a] / self.patch[a])
    }

    pub fn n_tokens(&self) -> usize {
        self.token_grid().iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.patch.iter().product()
    }

    /// Output dims reordered to the token-grid axis order (z, y, x).
    pub fn output_zyx(&self) -> [usize; 3] {
        [self.output_dims[2], self.output_dims[1], self.output_dims[0]]
    }

    /// Average-pool stride of pyramid scale `s`, per token-grid axis.
    pub fn pool_stride(&self, s: usize) -> [usize; 3] {
        let g = self.token_grid();
        [0, 1, 2].map(|a| (1usize << s).min(g[a]))
    }

    /// Encoder block whose output feeds pyramid scale `s`. The finest scale
    /// reads the last block and coarser scales read progressively earlier
    /// ones.
    pub fn tap_block(&self, s: usize) -> usize {
        self.depth - 1 - (s * self.depth) / self.pyramid_scales
    }

    /// Per-block upsampling flags, one `[z, y, x]` triple per decoder block.
    pub fn upsample_plan(&self) -> Vec<[bool; 3]> {
        let g = self.token_grid();
        let out = self.output_zyx();
        let steps: [u32; 3] = [0, 1, 2].map(|a| (out[a] / g[a]).trailing_zeros());
        let n = steps.iter().copied().max().unwrap_or(0) as usize;
        (0..n).map(|b| [0, 1, 2].map(|a| (b as u32) < steps[a])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.channels.is_empty() {
            return err("model.channels must not be empty".into());
        }
        let mut ch = self.channels.clone();
        ch.sort();
        ch.dedup();
        if ch.len() != self.channels.len() {
            return err("model.channels has duplicates".into());
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("depth", self.depth),
            ("pyramid_scales", self.pyramid_scales),
            ("fusion_dim", self.fusion_dim),
        ] {
            if v == 0 {
                return err(format!("model.{name} must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return err(format!("model.embed_dim {} is not divisible by model.heads {}", self.embed_dim, self.heads));
        }
        const AXES: [&str; 3] = ["slices", "height", "width"];
        for a in 0..3 {
            if self.patch[a] == 0 || self.input_dims[a] == 0 {
                return err(format!("model patch and input {} must be positive", AXES[a]));
            }
            if !self.input_dims[a].is_multiple_of(self.patch[a]) {
                return Err(ModelError::Shape(format!(
                    "input {} {} is not divisible by patch {}",
                    AXES[a], self.input_dims[a], self.patch[a]
                )));
            }
        }
        let g = self.token_grid();
        for s in 0..self.pyramid_scales {
            let st = self.pool_stride(s);
            for a in 0..3 {
                if !g[a].is_multiple_of(st[a]) {
                    return err(format!(
                        "token grid {} {} is not divisible by pyramid stride {}",
                        AXES[a], g[a], st[a]
                    ));
                }
            }
        }
        let out = self.output_zyx();
        for a in 0..3 {
            let ok = out[a] >= g[a] && out[a].is_multiple_of(g[a]) && (out[a] / g[a]).is_power_of_two();
            if !ok {
                return err(format!(
                    "model.output_dims {:?} cannot be reached from token grid {:?} by 2x upsampling",
                    self.output_dims, g
                ));
            }
        }
        let blocks = self.upsample_plan().len();
        if self.decoder_channels.len() != blocks {
            return err(format!(
                "model.decoder_channels needs {blocks} entries, one per upsampling step, got {}",
                self.decoder_channels.len()
            ));
        }
        if self.decoder_channels.contains(&0) {
            return err("model.decoder_channels entries must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count, independent of the allocation code.
    pub fn param_count(&self) -> usize {
        let e = self.embed_dim;
        let f = self.fusion_dim;
        let patch = self.channels.len() * self.patch_len() * e;
        let pos = self.n_tokens() * e;
        let block = 2 * 2 * e + (e * 3 * e + 3 * e) + (e * e + e) + (e * 4 * e + 4 * e) + (4 * e * e + e);
        let pyramid = self.pyramid_scales * (e * f + f + 1);
        let mut decoder = 0;
        let mut c_in = f;
        for &c in &self.decoder_channels {
            decoder += 27 * c_in * c + c;
            c_in = c;
        }
        decoder += c_in + 1;
        patch + pos + self.depth * block + pyramid + decoder
    }
}
