//! Slice-wise threshold-and-extrude reconstruction, the 2D multi-plane
//! reference method.

use crate::error::{Error, Result};
use crate::geom;
use crate::srus::{Channel, SliceStack};
use crate::volume::{Grid, Mask};

/// Thresholds each slice's grayscale (undoing any stored z-scoring) at
/// `threshold` and copies the result to every voxel of `grid` whose centre
/// is nearest to that slice's plane. Voxels outside a plane's pixel grid
/// stay background. Ignores any 3D continuity on purpose.
pub fn naive_extrusion_baseline(stack: &SliceStack, threshold: f64, grid: &Grid) -> Result<Mask> {
    let g = stack
        .channel_index(Channel::Grayscale)
        .ok_or_else(|| Error::Parameter("extrusion baseline needs the grayscale channel".into()))?;
    let mut out = Mask::zeros(grid.clone());
    let planes: Vec<usize> = (0..stack.len()).filter(|&k| !stack.slices[k].warning).collect();
    if planes.is_empty() {
        return Ok(out);
    }
    let px = stack.pixel_spacing_um * 1e-3;
    let masks: Vec<Vec<bool>> = planes
        .iter()
        .map(|&k| {
            let (mean, std) = stack.normalization[k].map_or((0.0, 1.0), |n| (n.mean, n.std));
            stack.slices[k].data[g].data.iter().map(|&v| v as f64 * std + mean >= threshold).collect()
        })
        .collect();
    for i in 0..grid.len() {
        let [x, y, z] = grid.coords(i);
        let c = grid.center(x, y, z);
        let mut best = (f64::INFINITY, 0);
        for (pi, &k) in planes.iter().enumerate() {
            let pose = &stack.slices[k].pose;
            let d = geom::dot(geom::sub(c, pose.origin), pose.normal).abs();
            if d < best.0 {
                best = (d, pi);
            }
        }
        let pose = &stack.slices[planes[best.1]].pose;
        let rel = geom::sub(c, pose.origin);
        let u = (geom::dot(rel, pose.u) / px - 0.5).round();
        let v = (geom::dot(rel, pose.v) / px - 0.5).round();
        if u < 0.0 || v < 0.0 || u >= stack.width as f64 || v >= stack.height as f64 {
            continue;
        }
        if masks[best.1][v as usize * stack.width + u as usize] {
            out.data[i] = 1;
        }
    }
    Ok(out)
}
