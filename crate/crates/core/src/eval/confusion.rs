//! Voxelwise confusion counts and the rates derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Counts with foreground and background exchanged in both masks.
    pub fn complement(&self) -> Self {
        Self { tp: self.tn, fp: self.fn_, tn: self.tp, fn_: self.fp }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

/// Rates with a zero denominator are `None` and named in `flags`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub counts: ConfusionCounts,
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub flags: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionMetrics {
    pub fn from_counts(c: ConfusionCounts) -> Self {
        let mut flags = Vec::new();
        let mut dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
        if dice.is_none() {
            // both masks empty: perfect agreement by convention
            dice = Some(1.0);
            flags.push("dice_of_empty_masks".to_string());
        }
        let rates = [
            ("sensitivity", ratio(c.tp, c.tp + c.fn_)),
            ("specificity", ratio(c.tn, c.tn + c.fp)),
            ("accuracy", ratio(c.tp + c.tn, c.total())),
            ("ppv", ratio(c.tp, c.tp + c.fp)),
            ("npv", ratio(c.tn, c.tn + c.fn_)),
        ];
        for (name, v) in &rates {
            if v.is_none() {
                flags.push(format!("{name}_undefined"));
            }
        }
        Self {
            counts: c,
            dice,
            sensitivity: rates[0].1,
            specificity: rates[1].1,
            accuracy: rates[2].1,
            ppv: rates[3].1,
            npv: rates[4].1,
            flags,
        }
    }
}

pub fn confusion_counts(pred: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if pred.grid.dims != truth.grid.dims {
        return Err(Error::Shape(format!(
            "prediction dims {:?} differ from truth dims {:?}",
            pred.grid.dims, truth.grid.dims
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn confusion_metrics(pred: &Mask, truth: &Mask) -> Result<ConfusionMetrics> {
    Ok(ConfusionMetrics::from_counts(confusion_counts(pred, truth)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn mask(bits: &[u8]) -> Mask {
        let g = Grid::isotropic([bits.len(), 1, 1], 1.0).unwrap();
        Mask::from_data(g, bits.to_vec()).unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let a = mask(&[1, 0, 1, 1, 0]);
        let m = confusion_metrics(&a, &a).unwrap();
        assert_eq!(m.dice, Some(1.0));
        assert_eq!(m.accuracy, Some(1.0));
        assert!(m.flags.is_empty());
    }

    #[test]
    fn disjoint_and_half_overlap() {
        let a = mask(&[1, 1, 0, 0]);
        let b = mask(&[0, 0, 1, 1]);
        assert_eq!(confusion_metrics(&a, &b).unwrap().dice, Some(0.0));
        let a = mask(&[1, 1, 1, 1, 0, 0]);
        let b = mask(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(confusion_metrics(&a, &b).unwrap().dice, Some(0.5));
    }

    #[test]
    fn empty_masks_are_flagged() {
        let a = mask(&[0, 0, 0]);
        let m = confusion_metrics(&a, &a).unwrap();
        assert_eq!(m.dice, Some(1.0));
        assert_eq!(m.sensitivity, None);
        assert!(m.flags.contains(&"dice_of_empty_masks".to_string()));
        assert!(m.flags.contains(&"sensitivity_undefined".to_string()));
    }

    #[test]
    fn dim_mismatch_is_a_shape_error() {
        let r = confusion_metrics(&mask(&[1, 0]), &mask(&[1, 0, 0]));
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
