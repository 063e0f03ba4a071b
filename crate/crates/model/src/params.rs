//! Named network weights, seeded initialization and the on-disk format.
//!
//! A parameter file is a JSON manifest (config echo plus tensor index) next
//! to a raw little-endian f64 payload.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vascufold_core::{rng, Real};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    payload: String,
    total: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    offset: usize,
}

/// Payload path for a manifest path: `params.json` → `params.bin`.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let e = cfg.embed_dim;
    let f = cfg.fusion_dim;
    let std = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: String, dims: Vec<usize>, init: Init| v.push((name, dims, init));
    let plen = cfg.patch_len();
    let n_mod = cfg.channels.len();
    for c in &cfg.channels {
        add(format!("patch.{}.w", c.name()), vec![plen, e], std(plen * n_mod));
    }
    add("pos".into(), vec![cfg.n_tokens(), e], Init::Normal(0.02));
    // residual branches are damped so the initial stream stays near identity
    let resid = Init::Normal(1.0 / ((e * 2 * cfg.depth) as f64).sqrt());
    for i in 0..cfg.depth {
        let p = format!("block{i}");
        add(format!("{p}.ln1.g"), vec![e], Init::Ones);
        add(format!("{p}.ln1.b"), vec![e], Init::Zeros);
        add(format!("{p}.qkv.w"), vec![e, 3 * e], std(e));
        add(format!("{p}.qkv.b"), vec![3 * e], Init::Zeros);
        add(format!("{p}.out.w"), vec![e, e], resid);
        add(format!("{p}.out.b"), vec![e], Init::Zeros);
        add(format!("{p}.ln2.g"), vec![e], Init::Ones);
        add(format!("{p}.ln2.b"), vec![e], Init::Zeros);
        add(format!("{p}.mlp1.w"), vec![e, 4 * e], std(e));
        add(format!("{p}.mlp1.b"), vec![4 * e], Init::Zeros);
        add(format!("{p}.mlp2.w"), vec![4 * e, e], resid);
        add(format!("{p}.mlp2.b"), vec![e], Init::Zeros);
    }
    for s in 0..cfg.pyramid_scales {
        add(format!("pyramid{s}.w"), vec![e, f], std(e));
        add(format!("pyramid{s}.b"), vec![f], Init::Zeros);
        add(format!("pyramid{s}.gate"), vec![1], Init::Ones);
    }
    let mut c_in = f;
    for (i, &c) in cfg.decoder_channels.iter().enumerate() {
        add(format!("decoder{i}.w"), vec![c, c_in, 3, 3, 3], Init::Normal((2.0 / (27 * c_in) as f64).sqrt()));
        add(format!("decoder{i}.b"), vec![c], Init::Zeros);
        c_in = c;
    }
    add("head.w".into(), vec![1, c_in, 1, 1, 1], std(c_in));
    add("head.b".into(), vec![1], Init::Zeros);
    v
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialization for a validated config.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng(rng::derive_seed(config.seed, "model.init"));
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, dims, init) in layout(config) {
            let mut t = Tensor::zeros(&dims);
            match init {
                Init::Zeros => {}
                Init::Ones => t.data.fill(T::one()),
                Init::Normal(sd) => {
                    let d = Normal::new(0.0, sd).expect("positive std");
                    t.data.iter_mut().for_each(|v| *v = T::lit(d.sample(&mut rng)));
                }
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    fn assemble(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { config, names, tensors, index }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    /// Total scalar count over all tensors.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flat (tensor, element) address of the `k`-th scalar.
    pub fn locate(&self, mut k: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.len() {
                return Some((i, k));
            }
            k -= t.len();
        }
        None
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let payload = payload_path(manifest_path);
        let mut bytes = Vec::with_capacity(self.count() * 8);
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            entries.push(TensorEntry { name: name.clone(), dims: t.dims.clone(), offset });
            offset += t.len();
            for &v in &t.data {
                bytes.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        let manifest = Manifest {
            config: self.config.clone(),
            payload: payload.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            total: offset,
            tensors: entries,
        };
        if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
        }
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(manifest_path, json).map_err(|e| ModelError::io(manifest_path, e))?;
        fs::write(&payload, bytes).map_err(|e| ModelError::io(&payload, e))?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| ModelError::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| ModelError::Format { path: manifest_path.into(), msg: e.to_string() })?;
        let bad = |msg: String| ModelError::Format { path: manifest_path.into(), msg };
        let expected = layout(&manifest.config);
        if expected.len() != manifest.tensors.len() {
            return Err(bad(format!("{} tensors listed, config implies {}", manifest.tensors.len(), expected.len())));
        }
        let payload = payload_path(manifest_path);
        let bytes = fs::read(&payload).map_err(|e| ModelError::io(&payload, e))?;
        if bytes.len() != manifest.total * 8 {
            return Err(bad(format!("payload holds {} bytes, manifest expects {}", bytes.len(), manifest.total * 8)));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (entry, (name, dims, _)) in manifest.tensors.iter().zip(expected) {
            if entry.name != name || entry.dims != dims {
                return Err(bad(format!("tensor {} does not match the config layout", entry.name)));
            }
            let n: usize = dims.iter().product();
            if entry.offset + n > manifest.total {
                return Err(bad(format!("tensor {} overruns the payload", entry.name)));
            }
            let data = bytes[entry.offset * 8..(entry.offset + n) * 8]
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect();
            names.push(name);
            tensors.push(Tensor::from_vec(&dims, data)?);
        }
        Ok(Self::assemble(manifest.config, names, tensors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_matches_formula() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                depth: 1,
                pyramid_scales: 1,
                channels: vec![vascufold_core::Channel::Grayscale],
                ..Default::default()
            },
        ] {
            let p = ModelParams::<f64>::init(&cfg).unwrap();
            assert_eq!(p.count(), cfg.param_count());
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = ModelParams::<f64>::init(&cfg).unwrap();
        assert_eq!(a, ModelParams::init(&cfg).unwrap());
        let b = ModelParams::<f64>::init(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.tensors, b.tensors);
    }
}
