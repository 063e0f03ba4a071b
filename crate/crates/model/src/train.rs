//! SGD with momentum, per-epoch validation and best-checkpoint selection.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use vascufold_core::rng;

use crate::error::{ModelError, Result};
use crate::input::ModelInput;
use crate::loss::loss_and_grad;
use crate::network::forward_logits;
use crate::params::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over all epochs.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub batch_size: usize,
    /// Rescales the batch gradient when its global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
    /// Return the parameters of the best validation epoch rather than the
    /// last one.
    pub select_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.05,
            schedule: Schedule::Constant,
            momentum: 0.9,
            batch_size: 4,
            grad_clip: None,
            select_best: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::Config("training.epochs and training.batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(ModelError::Config("training.learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ModelError::Config("training.momentum must lie in [0, 1)".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(ModelError::Config("training.grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// One training example: network input and binary target in `[Z, Y, X]`
/// order.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: ModelInput<f64>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch, evaluated before each update.
    pub loss: f64,
    pub val_dice: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f64>,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

pub const HISTORY_HEADER: &str = "epoch,loss,val_dice,wall_ms";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let vd = r.val_dice.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
        let _ = writeln!(s, "{},{:.9},{},{}", r.epoch, r.loss, vd, r.wall_ms);
    }
    s
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    fs::write(path, history_csv(history)).map_err(|e| ModelError::io(path, e))
}

/// Hard Dice at threshold ½; two empty masks score 1.
pub fn dice_at_half(logits: &[f64], target: &[f64]) -> f64 {
    let (mut inter, mut sp, mut st) = (0usize, 0usize, 0usize);
    for (&z, &t) in logits.iter().zip(target) {
        let p = z >= 0.0;
        let t = t >= 0.5;
        inter += (p && t) as usize;
        sp += p as usize;
        st += t as usize;
    }
    if sp + st == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sp + st) as f64
    }
}

pub fn mean_dice(samples: &[Sample], params: &ModelParams<f64>) -> f64 {
    let s: f64 = samples.iter().map(|x| dice_at_half(&forward_logits(&x.input, params).data, &x.target)).sum();
    s / samples.len() as f64
}

fn check_samples(samples: &[Sample], params: &ModelParams<f64>, what: &str) -> Result<()> {
    let cfg = &params.config;
    let voxels: usize = cfg.output_dims.iter().product();
    for (i, s) in samples.iter().enumerate() {
        let shapes_ok = s.input.patches.len() == cfg.channels.len()
            && s.input.patches.iter().all(|p| p.dims == [cfg.n_tokens(), cfg.patch_len()]);
        if !shapes_ok || s.target.len() != voxels {
            return Err(ModelError::Shape(format!("{what} sample {i} does not match the model config")));
        }
    }
    Ok(())
}

pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    init: ModelParams<f64>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::Config("training set is empty".into()));
    }
    check_samples(train_set, &init, "training")?;
    check_samples(val_set, &init, "validation")?;

    let mut params = init;
    let mut velocity: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle = rng::rng(rng::derive_seed(cfg.seed, "train.shuffle"));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams<f64>)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle);
        let lr = cfg.rate(epoch);
        let mut sample_loss = vec![0.0; train_set.len()];
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
            for &i in batch {
                let s = &train_set[i];
                let lg = loss_and_grad(&s.input, &s.target, &params);
                let finite = lg.loss.is_finite() && lg.grads.iter().all(|g| g.all_finite());
                if !finite {
                    let op = lg.nonfinite_op.map(|k| format!(", first non-finite tape op {k}")).unwrap_or_default();
                    return Err(ModelError::Diverged(format!(
                        "epoch {epoch}, step {step}, sample {i}: loss {}{op}",
                        lg.loss
                    )));
                }
                sample_loss[i] = lg.loss;
                for (a, g) in acc.iter_mut().zip(&lg.grads) {
                    for (a, &g) in a.iter_mut().zip(&g.data) {
                        *a += g;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let mut scale = inv;
            if let Some(clip) = cfg.grad_clip {
                let norm = acc.iter().flatten().map(|g| (g * inv) * (g * inv)).sum::<f64>().sqrt();
                if norm > clip {
                    scale *= clip / norm;
                }
            }
            for ((t, v), g) in params.tensors.iter_mut().zip(&mut velocity).zip(&acc) {
                for ((p, v), &g) in t.data.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = cfg.momentum * *v + g * scale;
                    *p -= lr * *v;
                }
            }
            step += 1;
        }
        // summed in sample order so the value does not depend on the shuffle
        let loss = sample_loss.iter().sum::<f64>() / train_set.len() as f64;
        let val_dice = (!val_set.is_empty()).then(|| mean_dice(val_set, &params));
        let wall_ms = start.elapsed().as_millis() as u64;
        log::info!(
            "epoch {epoch}: loss {loss:.5} val_dice {} lr {lr:.4} ({wall_ms} ms)",
            val_dice.map(|d| format!("{d:.4}")).unwrap_or_else(|| "NA".into())
        );
        history.push(EpochRecord { epoch, loss, val_dice, wall_ms });
        let score = val_dice.unwrap_or(f64::NEG_INFINITY);
        let better = match &best {
            None => true,
            Some((b, _, _)) => !cfg.select_best || val_dice.is_none() || score > *b,
        };
        if better {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome { params, history, best_epoch })
}
