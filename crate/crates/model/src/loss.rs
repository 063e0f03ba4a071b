//! Soft-Dice plus binary cross-entropy, and full-network gradients.

use vascufold_core::Real;

use crate::error::{ModelError, Result};
use crate::input::ModelInput;
use crate::network::{logits_on_tape, Bound};
use crate::params::ModelParams;
use crate::tape::{Tape, DICE_EPS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub soft_dice: f64,
    pub bce: f64,
}

impl LossValue {
    pub fn total(&self) -> f64 {
        self.soft_dice + self.bce
    }
}

/// `1 − (2Σpt + ε) / (Σp + Σt + ε)`
pub fn soft_dice(pred: &[f64], target: &[f64]) -> f64 {
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let sp: f64 = pred.iter().sum();
    let st: f64 = target.iter().sum();
    1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS)
}

/// Mean binary cross-entropy; `0 · ln 0` is taken as 0.
pub fn bce(pred: &[f64], target: &[f64]) -> f64 {
    let xlogy = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * y.ln() };
    let s: f64 = pred.iter().zip(target).map(|(&p, &t)| -(xlogy(t, p) + xlogy(1.0 - t, 1.0 - p))).sum();
    s / pred.len() as f64
}

/// Loss of a probability volume against a binary target.
pub fn loss(pred: &[f64], target: &[f64]) -> Result<LossValue> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(ModelError::Shape(format!("prediction has {} voxels, target {}", pred.len(), target.len())));
    }
    Ok(LossValue { soft_dice: soft_dice(pred, target), bce: bce(pred, target) })
}

/// Training loss and its gradient for every parameter tensor.
pub struct LossGrad<T> {
    pub loss: T,
    pub grads: Vec<Tensor<T>>,
    /// First tape op with a non-finite output, when tracked.
    pub nonfinite_op: Option<usize>,
}

pub fn loss_and_grad<T: Real>(input: &ModelInput<T>, target: &[T], params: &ModelParams<T>) -> LossGrad<T> {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params);
    let logits = logits_on_tape(&mut tape, &p, input);
    let l = tape.dice_bce(logits, target.to_vec());
    let mut g = tape.backward(l);
    let grads = p
        .vars
        .iter()
        .zip(&params.tensors)
        .map(|(v, t)| g[v.index()].take().unwrap_or_else(|| Tensor::zeros(&t.dims)))
        .collect();
    LossGrad { loss: tape.value(l).data[0], grads, nonfinite_op: tape.first_nonfinite() }
}

/// Loss only, through the same tape code path.
pub fn loss_value<T: Real>(input: &ModelInput<T>, target: &[T], params: &ModelParams<T>) -> T {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params);
    let logits = logits_on_tape(&mut tape, &p, input);
    let l = tape.dice_bce(logits, target.to_vec());
    tape.value(l).data[0]
}

/// Outcome of a central finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, element, analytic, numeric)` of the worst entry.
    pub worst: (String, usize, f64, f64),
}

/// Compares analytic gradients with central differences at `samples`
/// parameter positions drawn by `pick`. Relative error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    input: &ModelInput<f64>,
    target: &[f64],
    params: &ModelParams<f64>,
    positions: &[usize],
    h: f64,
    floor: f64,
) -> GradCheck {
    let analytic = loss_and_grad(input, target, params);
    let mut worst = (String::new(), 0, 0.0, 0.0);
    let mut max_rel = 0.0f64;
    let mut p = params.clone();
    for &k in positions {
        let (ti, ei) = params.locate(k).expect("position within parameter count");
        let orig = p.tensors[ti].data[ei];
        p.tensors[ti].data[ei] = orig + h;
        let up = loss_value(input, target, &p);
        p.tensors[ti].data[ei] = orig - h;
        let down = loss_value(input, target, &p);
        p.tensors[ti].data[ei] = orig;
        let num = (up - down) / (2.0 * h);
        let an = analytic.grads[ti].data[ei];
        let rel = (an - num).abs() / an.abs().max(num.abs()).max(floor);
        if rel >= max_rel {
            max_rel = rel;
            worst = (params.names()[ti].clone(), ei, an, num);
        }
    }
    GradCheck { checked: positions.len(), max_rel_error: max_rel, worst }
}
