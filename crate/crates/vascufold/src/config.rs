//! Experiment configuration: loading, `--set` overrides and cross-section
//! validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vascufold_core::phantom::PhantomConfig;
use vascufold_core::preprocess::PreprocessConfig;
use vascufold_core::quant::{ExtractConfig, QuantOptions};
use vascufold_core::srus::{Axis, DegradationConfig, SliceConfig};
use vascufold_model::{ModelConfig, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_cases: usize,
    pub validation_cases: usize,
    /// Ground-truth voxel grid (x, y, z), anchored at the origin.
    pub grid_dims: [usize; 3],
    pub voxel_mm: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { train_cases: 64, validation_cases: 16, grid_dims: [32, 32, 32], voxel_mm: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructionConfig {
    pub threshold: f64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct QuantificationConfig {
    pub extract: ExtractConfig,
    pub options: QuantOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Grayscale level of the naive extrusion baseline, in raw intensity.
    pub baseline_threshold: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { baseline_threshold: 0.5 }
    }
}

/// Whole-pipeline configuration. Per-section `seed` fields are ignored on
/// input: every stream is derived from the top-level `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub phantom: PhantomConfig,
    pub simulation: SliceConfig,
    pub degradation: DegradationConfig,
    pub preprocessing: PreprocessConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub reconstruction: ReconstructionConfig,
    pub quantification: QuantificationConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dataset = DatasetConfig::default();
        let mut cfg = Self {
            seed: 0,
            output_dir: None,
            phantom: PhantomConfig {
                region_mm: [0.64; 3],
                root_radius_um: 80.0,
                segment_length_mm: [0.12, 0.22],
                clearance_um: 20.0,
                trees: 2,
                ..Default::default()
            },
            simulation: SliceConfig { count: 4, spacing_mm: 0.16, ..Default::default() },
            degradation: DegradationConfig { jitter_px: 0.0, ..Default::default() },
            preprocessing: PreprocessConfig::default(),
            model: ModelConfig {
                input_dims: [4, 32, 32],
                patch: [1, 4, 4],
                embed_dim: 32,
                heads: 4,
                depth: 2,
                pyramid_scales: 3,
                fusion_dim: 32,
                decoder_channels: vec![16, 8, 8],
                output_dims: dataset.grid_dims,
                seed: 0,
                ..Default::default()
            },
            training: TrainConfig {
                epochs: 25,
                learning_rate: 0.1,
                schedule: vascufold_model::Schedule::Cosine,
                batch_size: 4,
                grad_clip: Some(1.0),
                // the validation cases are also the evaluation cases
                select_best: false,
                ..Default::default()
            },
            dataset,
            reconstruction: ReconstructionConfig::default(),
            quantification: QuantificationConfig::default(),
            evaluation: EvaluationConfig::default(),
        };
        cfg.derive_seeds();
        cfg
    }
}

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

/// Recursively overlays `top` onto `base`; objects merge, anything else
/// replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Writes `value` at a dotted path, creating objects as needed. Numeric
/// segments index into arrays.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(user(format!("--set key `{key}` has an empty segment")));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize =
                    part.parse().map_err(|_| user(format!("--set key `{key}`: `{part}` must index an array")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| user(format!("--set key `{key}`: index {idx} out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(user(format!("--set key `{key}`: `{}` is not a section", parts[..i].join(".")))),
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Parses `key=value`; the value is read as JSON and falls back to a
/// plain string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s.split_once('=').ok_or_else(|| user(format!("--set expects key=value, got `{s}`")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl ExperimentConfig {
    /// Reads a config file, applies overrides and validates. Keys missing
    /// from the file take the built-in defaults.
    pub fn load(path: &Path, sets: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| user(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| user(format!("config {} is not valid JSON: {e}", path.display())))?;
        Self::from_value(value, sets, seed, &path.display().to_string())
    }

    pub fn from_value(overrides: Value, sets: &[String], seed: Option<u64>, origin: &str) -> Result<Self, CliError> {
        if !overrides.is_object() {
            return Err(user(format!("config {origin} must be a JSON object")));
        }
        // partial sections fill in from the experiment defaults, not from
        // each section type's own defaults
        let mut value = serde_json::to_value(ExperimentConfig::default())?;
        merge(&mut value, overrides);
        for s in sets {
            let (k, v) = parse_assignment(s)?;
            set_path(&mut value, &k, v)?;
        }
        if let Some(seed) = seed {
            set_path(&mut value, "seed", Value::from(seed))?;
        }
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            user(format!("config {origin}: key `{path}`: {}", e.inner()))
        })?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overwrites section seeds with streams derived from the global seed.
    pub fn derive_seeds(&mut self) {
        use vascufold_core::rng::derive_seed;
        self.phantom.seed = derive_seed(self.seed, "phantom");
        self.simulation.seed = derive_seed(self.seed, "simulation");
        self.degradation.seed = derive_seed(self.seed, "degradation");
        self.model.seed = derive_seed(self.seed, "model");
        self.training.seed = derive_seed(self.seed, "training");
    }

    pub fn total_cases(&self) -> usize {
        self.dataset.train_cases + self.dataset.validation_cases
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if d.train_cases == 0 {
            return Err(user("key `dataset.train_cases`: must be at least 1"));
        }
        if d.validation_cases == 0 {
            return Err(user("key `dataset.validation_cases`: must be at least 1"));
        }
        if d.grid_dims.contains(&0) || !(d.voxel_mm > 0.0) {
            return Err(user("key `dataset.grid_dims` / `dataset.voxel_mm`: must be positive"));
        }
        if self.simulation.axis != Axis::Z {
            return Err(user("key `simulation.axis`: the model reads z-normal slices only"));
        }
        if !(0.0..=1.0).contains(&self.reconstruction.threshold) {
            return Err(user("key `reconstruction.threshold`: must lie in [0, 1]"));
        }
        self.degradation.validate().map_err(|e| user(format!("section `degradation`: {e}")))?;
        self.model.validate().map_err(|e| user(format!("section `model`: {e}")))?;
        self.training.validate().map_err(|e| user(format!("section `training`: {e}")))?;
        let want_in = [self.simulation.count, d.grid_dims[1], d.grid_dims[0]];
        if self.model.input_dims != want_in {
            return Err(user(format!(
                "key `model.input_dims`: {:?} must equal [simulation.count, grid y, grid x] = {want_in:?}",
                self.model.input_dims
            )));
        }
        if self.model.output_dims != d.grid_dims {
            return Err(user(format!(
                "key `model.output_dims`: {:?} must equal dataset.grid_dims {:?}",
                self.model.output_dims, d.grid_dims
            )));
        }
        let slab = self.simulation.count as f64 * self.simulation.spacing_mm;
        let depth = d.grid_dims[2] as f64 * d.voxel_mm;
        if (slab - depth).abs() > 1e-9 {
            return Err(user(format!(
                "key `simulation.spacing_mm`: {} planes x {} mm must span the grid depth {depth} mm",
                self.simulation.count, self.simulation.spacing_mm
            )));
        }
        if let Some(c) = self.model.channels.iter().find(|c| !self.simulation.channels.contains(c)) {
            return Err(user(format!("key `model.channels`: {} is not simulated (simulation.channels)", c.name())));
        }
        let extent = d.grid_dims.map(|n| n as f64 * d.voxel_mm);
        for a in 0..3 {
            if (extent[a] - self.phantom.region_mm[a]).abs() > 1e-9 {
                return Err(user(format!(
                    "key `phantom.region_mm`: {:?} must match the grid extent {extent:?}",
                    self.phantom.region_mm
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn partial_sections_keep_experiment_defaults() {
        let cfg = ExperimentConfig::from_value(json!({"training": {"epochs": 3}}), &[], None, "t").unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.training.grad_clip, Some(1.0));
        assert_eq!(cfg.simulation.count, ExperimentConfig::default().simulation.count);
    }

    #[test]
    fn overrides_and_errors_name_keys() {
        let sets = ["model.patch.0=1".to_string(), "training.schedule=\"constant\"".into()];
        let cfg = ExperimentConfig::from_value(json!({}), &sets, Some(4), "t").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.training.schedule, vascufold_model::Schedule::Constant);
        let err = ExperimentConfig::from_value(json!({"phantom": {"depthh": 1}}), &[], None, "t").unwrap_err();
        assert!(err.to_string().contains("phantom") && err.to_string().contains("depthh"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }
}
