//! Topology-preserving 3D thinning.

use std::sync::OnceLock;

use crate::volume::{Grid, Mask};

const CENTER: usize = 13;
const FACES: [usize; 6] = [4, 10, 12, 14, 16, 22];

struct Tables {
    adj26: Vec<Vec<usize>>,
    adj6: Vec<Vec<usize>>,
    n18: u32,
}

fn cube(i: usize) -> [i32; 3] {
    [(i % 3) as i32 - 1, ((i / 3) % 3) as i32 - 1, (i / 9) as i32 - 1]
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6 = vec![Vec::new(); 27];
        let mut n18 = 0u32;
        for i in 0..27 {
            let a = cube(i);
            if i != CENTER && a.iter().map(|v| v.abs()).sum::<i32>() <= 2 {
                n18 |= 1 << i;
            }
            for j in 0..27 {
                if i == j || i == CENTER || j == CENTER {
                    continue;
                }
                let b = cube(j);
                let d: Vec<i32> = (0..3).map(|k| (a[k] - b[k]).abs()).collect();
                if d.iter().all(|&v| v <= 1) {
                    adj26[i].push(j);
                    if d.iter().sum::<i32>() == 1 {
                        adj6[i].push(j);
                    }
                }
            }
        }
        Tables { adj26, adj6, n18 }
    })
}

/// Connected components of the set `bits` under `adj`; with `seeds`, only
/// components containing a seed position are counted.
fn components(bits: u32, adj: &[Vec<usize>], seeds: Option<&[usize]>) -> usize {
    let mut seen = 0u32;
    let mut count = 0;
    let mut stack = [0usize; 27];
    let starts: Vec<usize> = match seeds {
        Some(s) => s.to_vec(),
        None => (0..27).collect(),
    };
    for s in starts {
        if bits & (1 << s) == 0 || seen & (1 << s) != 0 {
            continue;
        }
        count += 1;
        seen |= 1 << s;
        let mut top = 1;
        stack[0] = s;
        while top > 0 {
            top -= 1;
            let v = stack[top];
            for &w in &adj[v] {
                if bits & (1 << w) != 0 && seen & (1 << w) == 0 {
                    seen |= 1 << w;
                    stack[top] = w;
                    top += 1;
                }
            }
        }
    }
    count
}

/// Simple-point test for 26-connected foreground and 6-connected
/// background, given the 3×3×3 neighbourhood as a bitmask.
pub fn is_simple(neighbourhood: u32) -> bool {
    let t = tables();
    let fg = neighbourhood & !(1 << CENTER) & ((1 << 27) - 1);
    if components(fg, &t.adj26, None) != 1 {
        return false;
    }
    let bg = !neighbourhood & t.n18;
    components(bg, &t.adj6, Some(&FACES)) == 1
}

/// Zero-padded working copy with precomputed neighbour offsets.
struct Padded {
    dims: [usize; 3],
    data: Vec<u8>,
    offsets: [isize; 27],
}

impl Padded {
    fn new(mask: &Mask) -> Self {
        let [nx, ny, nz] = mask.grid.dims;
        let dims = [nx + 2, ny + 2, nz + 2];
        let mut data = vec![0u8; dims[0] * dims[1] * dims[2]];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if mask.get(x, y, z) != 0 {
                        data[((z + 1) * dims[1] + y + 1) * dims[0] + x + 1] = 1;
                    }
                }
            }
        }
        let mut offsets = [0isize; 27];
        for (i, o) in offsets.iter_mut().enumerate() {
            let [dx, dy, dz] = cube(i);
            *o = (dz as isize * dims[1] as isize + dy as isize) * dims[0] as isize + dx as isize;
        }
        Self { dims, data, offsets }
    }

    #[inline]
    fn neighbourhood(&self, i: usize) -> u32 {
        let mut bits = 0u32;
        for (k, &o) in self.offsets.iter().enumerate() {
            if self.data[(i as isize + o) as usize] != 0 {
                bits |= 1 << k;
            }
        }
        bits
    }

    fn unpad(&self, grid: &Grid) -> Mask {
        let mut out = Mask::zeros(grid.clone());
        let [nx, ny, nz] = grid.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if self.data[((z + 1) * self.dims[1] + y + 1) * self.dims[0] + x + 1] != 0 {
                        out.set(x, y, z, 1);
                    }
                }
            }
        }
        out
    }
}

/// Curve skeleton by directional thinning. Each pass visits the six face
/// directions; a voxel whose neighbour in that direction is background is
/// removed when it is simple and not an endpoint (exactly one foreground
/// neighbour). Candidates are re-tested one by one in index order at
/// removal time, so the result is deterministic and topology is preserved.
pub fn skeletonize(mask: &Mask) -> Mask {
    let mut p = Padded::new(mask);
    let mut live: Vec<usize> = (0..p.data.len()).filter(|&i| p.data[i] != 0).collect();
    let endpoint = |bits: u32| (bits & !(1 << CENTER)).count_ones() == 1;
    loop {
        let mut changed = false;
        for &face in &FACES {
            let off = p.offsets[face];
            let candidates: Vec<usize> = live
                .iter()
                .copied()
                .filter(|&i| {
                    if p.data[i] == 0 || p.data[(i as isize + off) as usize] != 0 {
                        return false;
                    }
                    let nb = p.neighbourhood(i);
                    !endpoint(nb) && is_simple(nb)
                })
                .collect();
            for i in candidates {
                let nb = p.neighbourhood(i);
                if !endpoint(nb) && is_simple(nb) {
                    p.data[i] = 0;
                    changed = true;
                }
            }
        }
        live.retain(|&i| p.data[i] != 0);
        if !changed {
            break;
        }
    }
    p.unpad(&mask.grid)
}

/// 26-connected foreground components of a mask.
pub fn count_components(mask: &Mask) -> usize {
    let p = Padded::new(mask);
    let mut seen = vec![false; p.data.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for s in 0..p.data.len() {
        if p.data[s] == 0 || seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        stack.push(s);
        while let Some(v) = stack.pop() {
            for (k, &o) in p.offsets.iter().enumerate() {
                if k == CENTER {
                    continue;
                }
                let w = (v as isize + o) as usize;
                if p.data[w] != 0 && !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
    }
    count
}

/// Euler characteristic of the foreground as a union of closed unit cubes,
/// which matches 26-connectivity for the foreground.
pub fn euler_characteristic(mask: &Mask) -> i64 {
    let [nx, ny, nz] = mask.grid.dims;
    let (ex, ey) = (2 * nx + 1, 2 * ny + 1);
    let mut cells = vec![false; ex * ey * (2 * nz + 1)];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) == 0 {
                    continue;
                }
                for dz in 0..3 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            cells[(2 * x + dx) + ex * ((2 * y + dy) + ey * (2 * z + dz))] = true;
                        }
                    }
                }
            }
        }
    }
    let mut chi = 0i64;
    for (i, &c) in cells.iter().enumerate() {
        if c {
            let (x, y, z) = (i % ex, (i / ex) % ey, i / (ex * ey));
            let odd = x % 2 + y % 2 + z % 2;
            chi += if odd % 2 == 0 { 1 } else { -1 };
        }
    }
    chi
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolated_and_interior_points_are_not_simple() {
        assert!(!is_simple(1 << CENTER));
        assert!(!is_simple((1 << 27) - 1));
        // a voxel on a flat face is simple
        let mut bits = 0u32;
        for i in 0..27 {
            if cube(i)[2] <= 0 {
                bits |= 1 << i;
            }
        }
        assert!(is_simple(bits));
        // the middle of a straight line is not
        assert!(!is_simple((1 << 4) | (1 << CENTER) | (1 << 22)));
    }

    #[test]
    fn euler_of_simple_shapes() {
        let g = Grid::isotropic([5, 5, 5], 1.0).unwrap();
        let mut m = Mask::zeros(g);
        m.set(4, 4, 4, 1);
        assert_eq!(euler_characteristic(&m), 1);
        // a separate square ring of eight voxels adds a component and a tunnel
        for (x, y) in [(1, 1), (2, 1), (3, 1), (3, 2), (3, 3), (2, 3), (1, 3), (1, 2)] {
            m.set(x, y, 2, 1);
        }
        assert_eq!(euler_characteristic(&m), 1);
        m.set(4, 4, 4, 0);
        assert_eq!(euler_characteristic(&m), 0);
    }

    #[test]
    fn empty_stays_empty() {
        let m = Mask::zeros(Grid::isotropic([5, 5, 5], 1.0).unwrap());
        assert_eq!(skeletonize(&m).count(), 0);
    }

    #[test]
    fn solid_box_becomes_thin_and_connected() {
        let mut m = Mask::zeros(Grid::isotropic([20, 9, 9], 1.0).unwrap());
        for z in 2..7 {
            for y in 2..7 {
                for x in 2..18 {
                    m.set(x, y, z, 1);
                }
            }
        }
        let s = skeletonize(&m);
        assert!(s.count() > 0 && s.count() < 30);
        assert_eq!(count_components(&s), 1);
        assert_eq!(euler_characteristic(&s), 1);
    }
}
