//! Exact Euclidean distance transform by separable lower envelopes of
//! parabolas (Felzenszwalb–Huttenlocher), with anisotropic spacing.

use crate::volume::{Grid, Mask, Volume};

/// Squared distance along one line of samples spaced `step` apart.
/// `f` holds 0 at seeds and `INFINITY` elsewhere on the first pass, or
/// partial squared distances on later passes.
fn envelope_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q as f64 * step).powi(2);
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + (p as f64 * step).powi(2);
                    let s = (fq - fp) / (2.0 * step * (q - p) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let x = p as f64 * step;
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = (p as f64 - v[k] as f64) * step;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance (in the grid's physical units) from every voxel centre to
/// the nearest voxel for which `seed` is true. No seeds gives `INFINITY`.
pub fn squared_distance_to(grid: &Grid, seed: impl Fn(usize) -> bool) -> Vec<f64> {
    let [nx, ny, nz] = grid.dims;
    let mut d: Vec<f64> = (0..grid.len()).map(|i| if seed(i) { 0.0 } else { f64::INFINITY }).collect();
    let mut v = Vec::new();
    let mut z = Vec::new();
    let mut line = Vec::new();
    let mut out = Vec::new();
    // axis 0..3 with strides
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = grid.dims[axis];
        let step = grid.spacing[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        let (outer_a, outer_b, sa, sb) = match axis {
            0 => (ny, nz, strides[1], strides[2]),
            1 => (nx, nz, strides[0], strides[2]),
            _ => (nx, ny, strides[0], strides[1]),
        };
        for b in 0..outer_b {
            for a in 0..outer_a {
                let base = a * sa + b * sb;
                for i in 0..n {
                    line[i] = d[base + i * strides[axis]];
                }
                envelope_1d(&line, step, &mut out, &mut v, &mut z);
                for i in 0..n {
                    d[base + i * strides[axis]] = out[i];
                }
            }
        }
    }
    d
}

/// Distance from each foreground voxel to the nearest background voxel
/// centre, in mm; zero on background.
pub fn distance_to_background(mask: &Mask) -> Volume<f64> {
    let sq = squared_distance_to(&mask.grid, |i| mask.data[i] == 0);
    Volume { grid: mask.grid.clone(), data: sq.into_iter().map(f64::sqrt).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(grid: &Grid, seeds: &[bool]) -> Vec<f64> {
        (0..grid.len())
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                let mut best = f64::INFINITY;
                for (j, &s) in seeds.iter().enumerate() {
                    if s {
                        let [a, b, c] = grid.coords(j);
                        let d = ((x as f64 - a as f64) * grid.spacing[0]).powi(2)
                            + ((y as f64 - b as f64) * grid.spacing[1]).powi(2)
                            + ((z as f64 - c as f64) * grid.spacing[2]).powi(2);
                        best = best.min(d);
                    }
                }
                best
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            dims in (1usize..7, 1usize..7, 1usize..7),
            spacing in (0.5f64..2.0, 0.5f64..2.0, 0.5f64..2.0),
            bits in proptest::collection::vec(proptest::bool::weighted(0.15), 343),
        ) {
            let grid = Grid::new([dims.0, dims.1, dims.2], [spacing.0, spacing.1, spacing.2], [0.0; 3]).unwrap();
            let seeds: Vec<bool> = bits[..grid.len()].to_vec();
            let fast = squared_distance_to(&grid, |i| seeds[i]);
            let slow = brute(&grid, &seeds);
            for (a, b) in fast.iter().zip(&slow) {
                if b.is_finite() {
                    prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
                } else {
                    prop_assert!(a.is_infinite());
                }
            }
        }
    }
}
