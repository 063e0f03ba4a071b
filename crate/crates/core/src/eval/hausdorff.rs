//! Symmetric Hausdorff distance between mask boundaries.

use serde::{Deserialize, Serialize};

use crate::edt::squared_distance_to;
use crate::error::{Error, Result};
use crate::volume::{Grid, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HausdorffResult {
    #[serde(with = "crate::sentinel")]
    pub hausdorff_px: f64,
    #[serde(with = "crate::sentinel")]
    pub hd95_px: f64,
    #[serde(with = "crate::sentinel")]
    pub hausdorff_mm: f64,
    #[serde(with = "crate::sentinel")]
    pub hd95_mm: f64,
    /// Set when a mask is empty and the distances are infinite.
    pub flag: Option<String>,
}

/// Foreground voxels with a 6-neighbour in the background or outside the grid.
pub fn boundary(mask: &Mask) -> Vec<usize> {
    let g = &mask.grid;
    let mut out = Vec::new();
    for i in 0..g.len() {
        if mask.data[i] == 0 {
            continue;
        }
        let [x, y, z] = g.coords(i).map(|v| v as i64);
        let open = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
            .iter()
            .any(|&(dx, dy, dz)| !mask.is_set(x + dx, y + dy, z + dz));
        if open {
            out.push(i);
        }
    }
    out
}

/// Linear-interpolated percentile of an unsorted sample, `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Distances from each boundary voxel of `from` to the boundary of `to`.
fn directed(grid: &Grid, from: &[usize], to: &[usize]) -> Vec<f64> {
    let mut seed = vec![false; grid.len()];
    for &i in to {
        seed[i] = true;
    }
    let sq = squared_distance_to(grid, |i| seed[i]);
    from.iter().map(|&i| sq[i].sqrt()).collect()
}

/// (max, 95th percentile) of the symmetric boundary distance on `grid`.
fn symmetric(grid: &Grid, a: &[usize], b: &[usize]) -> (f64, f64) {
    let ab = directed(grid, a, b);
    let ba = directed(grid, b, a);
    let max = ab.iter().chain(&ba).fold(0.0f64, |m, &d| m.max(d));
    let p95 = percentile(&ab, 0.95).max(percentile(&ba, 0.95));
    (max, p95)
}

/// Exact Hausdorff distance between the boundaries of two masks via
/// distance transforms, in voxel units and in mm. `hd95` is the larger of
/// the two directed 95th percentiles.
pub fn hausdorff(pred: &Mask, truth: &Mask) -> Result<HausdorffResult> {
    if pred.grid.dims != truth.grid.dims {
        return Err(Error::Shape(format!(
            "prediction dims {:?} differ from truth dims {:?}",
            pred.grid.dims, truth.grid.dims
        )));
    }
    let a = boundary(pred);
    let b = boundary(truth);
    if a.is_empty() || b.is_empty() {
        let both = a.is_empty() && b.is_empty();
        let v = if both { 0.0 } else { f64::INFINITY };
        return Ok(HausdorffResult {
            hausdorff_px: v,
            hd95_px: v,
            hausdorff_mm: v,
            hd95_mm: v,
            flag: Some(if both { "both_masks_empty" } else { "empty_mask" }.to_string()),
        });
    }
    let unit = Grid::isotropic(pred.grid.dims, 1.0)?;
    let (hausdorff_px, hd95_px) = symmetric(&unit, &a, &b);
    let (hausdorff_mm, hd95_mm) = symmetric(&pred.grid, &a, &b);
    Ok(HausdorffResult { hausdorff_px, hd95_px, hausdorff_mm, hd95_mm, flag: None })
}
