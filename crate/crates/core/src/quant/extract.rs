//! Centerline graph extraction from a curve skeleton.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use crate::geom::{self, P3};
use crate::graph::{GraphMeta, UnionFind, VascularGraph};
use crate::volume::{Mask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Terminal branches shorter than this multiple of the junction radius
    /// are pruned.
    pub spur_factor: f64,
    /// Cycles shorter than this multiple of the largest junction radius on
    /// them are opened at their longest edge. Digitised tube junctions leave
    /// small tunnels that thin to triangles or doubled edges.
    pub min_cycle_factor: f64,
    /// Subtracted from the voxel-centre distance value, in voxels, to move
    /// from the last foreground centre to the vessel wall.
    pub radius_offset_vox: f64,
    /// Laplacian smoothing passes over each polyline before measuring.
    pub smoothing_passes: usize,
    /// Extend free ends along their tangent to the mask boundary; thinning
    /// stops about one radius short of a flat vessel end.
    pub extend_terminals: bool,
    /// Move junctions to the least-squares meeting point of their branch
    /// axes; the medial axis otherwise branches a few voxels downstream.
    pub refine_junctions: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            spur_factor: 2.0,
            min_cycle_factor: 8.0,
            radius_offset_vox: -0.5,
            smoothing_passes: 4,
            extend_terminals: true,
            refine_junctions: true,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Clone, Debug)]
struct WEdge {
    a: usize,
    b: usize,
    poly: Vec<P3>,
    /// mm
    radii: Vec<f64>,
}

impl WEdge {
    fn length(&self) -> f64 {
        geom::polyline_length(&self.poly)
    }

    fn reversed(&self) -> WEdge {
        let mut poly = self.poly.clone();
        poly.reverse();
        let mut radii = self.radii.clone();
        radii.reverse();
        WEdge { a: self.b, b: self.a, poly, radii }
    }
}

struct Work {
    nodes: Vec<Option<(P3, f64)>>,
    edges: Vec<Option<WEdge>>,
}

impl Work {
    fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes.len()];
        for e in self.edges.iter().flatten() {
            d[e.a] += 1;
            d[e.b] += 1;
        }
        d
    }

    fn incident(&self, n: usize) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().filter(|e| e.a == n || e.b == n).map(|_| i))
            .collect()
    }

    /// Removes short terminal branches hanging off junctions.
    fn prune_spurs(&mut self, factor: f64) -> bool {
        let deg = self.degrees();
        let mut removed = false;
        for i in 0..self.edges.len() {
            let Some(e) = &self.edges[i] else { continue };
            if e.a == e.b {
                continue;
            }
            let (tip, root) = if deg[e.a] == 1 && deg[e.b] >= 3 {
                (e.a, e.b)
            } else if deg[e.b] == 1 && deg[e.a] >= 3 {
                (e.b, e.a)
            } else {
                continue;
            };
            let r = self.nodes[root].map_or(0.0, |n| n.1);
            if e.length() < factor * r {
                self.edges[i] = None;
                self.nodes[tip] = None;
                removed = true;
                // degrees changed; rescan from a fresh count next round
                break;
            }
        }
        removed
    }

    /// Removes the longest edge of one cycle shorter than `factor` times the
    /// largest radius of its end nodes.
    fn open_short_cycle(&mut self, factor: f64) -> bool {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, e) in self.edges.iter().enumerate() {
            if let Some(e) = e {
                adj[e.a].push(i);
                if e.b != e.a {
                    adj[e.b].push(i);
                }
            }
        }
        let mut order: Vec<(f64, usize)> =
            self.edges.iter().enumerate().filter_map(|(i, e)| e.as_ref().map(|e| (e.length(), i))).collect();
        order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for (len, i) in order {
            let e = self.edges[i].as_ref().unwrap();
            let r = [e.a, e.b].iter().map(|&n| self.nodes[n].map_or(0.0, |n| n.1)).fold(0.0, f64::max);
            let budget = factor * r - len;
            if budget < 0.0 {
                continue;
            }
            let closes = e.a == e.b || self.path_within(e.a, e.b, i, budget, &adj);
            if closes {
                self.edges[i] = None;
                return true;
            }
        }
        false
    }

    /// Whether `to` is reachable from `from` within `budget` without `skip`.
    fn path_within(&self, from: usize, to: usize, skip: usize, budget: f64, adj: &[Vec<usize>]) -> bool {
        let mut best = vec![f64::INFINITY; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        best[from] = 0.0;
        heap.push(Reverse((OrdF64(0.0), from)));
        while let Some(Reverse((OrdF64(d), n))) = heap.pop() {
            if n == to {
                return true;
            }
            if d > best[n] {
                continue;
            }
            for &j in &adj[n] {
                if j == skip {
                    continue;
                }
                let e = self.edges[j].as_ref().unwrap();
                let m = if e.a == n { e.b } else { e.a };
                let nd = d + e.length();
                if nd <= budget && nd < best[m] {
                    best[m] = nd;
                    heap.push(Reverse((OrdF64(nd), m)));
                }
            }
        }
        false
    }

    /// Joins the two edges meeting at every degree-2 node.
    fn merge_chains(&mut self) {
        loop {
            let deg = self.degrees();
            let mut merged = false;
            for n in 0..self.nodes.len() {
                if self.nodes[n].is_none() || deg[n] != 2 {
                    continue;
                }
                let inc = self.incident(n);
                if inc.len() != 2 {
                    continue; // a self-loop through n
                }
                let mut e0 = self.edges[inc[0]].take().unwrap();
                let mut e1 = self.edges[inc[1]].take().unwrap();
                if e0.b != n {
                    e0 = e0.reversed();
                }
                if e1.a != n {
                    e1 = e1.reversed();
                }
                e0.poly.extend_from_slice(&e1.poly[1..]);
                e0.radii.extend_from_slice(&e1.radii[1..]);
                e0.b = e1.b;
                self.edges[inc[0]] = Some(e0);
                self.nodes[n] = None;
                merged = true;
            }
            if !merged {
                break;
            }
        }
    }
}

fn laplacian_smooth(poly: &mut [P3], passes: usize) {
    for _ in 0..passes {
        if poly.len() < 3 {
            return;
        }
        let prev = poly.to_vec();
        for i in 1..poly.len() - 1 {
            poly[i] = geom::scale(geom::add(geom::add(prev[i - 1], prev[i + 1]), geom::scale(prev[i], 2.0)), 0.25);
        }
    }
}

/// Builds a centerline graph from `skeleton`. `distance` is the Euclidean
/// distance (mm) from each voxel centre to the nearest background centre,
/// zero on background.
pub fn extract_graph(skeleton: &Mask, distance: &Volume<f64>, cfg: &ExtractConfig) -> VascularGraph {
    let grid = skeleton.grid.clone();
    let s = grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let [nx, ny, nz] = grid.dims;
    let on = |x: i64, y: i64, z: i64| skeleton.is_set(x, y, z);
    let coords = |i: usize| grid.coords(i);
    let radius_at = |i: usize| (distance.data[i] - cfg.radius_offset_vox * s).max(0.25 * s);

    let neighbours = |i: usize| -> Vec<usize> {
        let [x, y, z] = coords(i);
        let mut out = Vec::with_capacity(26);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let (a, b, c) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if on(a, b, c) {
                        out.push(grid.index(a as usize, b as usize, c as usize));
                    }
                }
            }
        }
        out
    };

    let voxels: Vec<usize> = (0..nx * ny * nz).filter(|&i| skeleton.data[i] != 0).collect();
    let mut slot = vec![usize::MAX; grid.len()];
    for (k, &v) in voxels.iter().enumerate() {
        slot[v] = k;
    }
    let nbrs: Vec<Vec<usize>> = voxels.iter().map(|&v| neighbours(v)).collect();
    let deg: Vec<usize> = nbrs.iter().map(Vec::len).collect();

    // junction voxels that touch merge into one node
    let mut uf = UnionFind::new(voxels.len());
    for (k, n) in nbrs.iter().enumerate() {
        if deg[k] >= 3 {
            for &w in n {
                if deg[slot[w]] >= 3 {
                    uf.union(k, slot[w]);
                }
            }
        }
    }
    let mut node_of = vec![usize::MAX; voxels.len()];
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut root_node = std::collections::HashMap::new();
    for k in 0..voxels.len() {
        if deg[k] == 2 {
            continue;
        }
        let r = uf.find(k);
        let id = *root_node.entry(r).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        node_of[k] = id;
        members[id].push(k);
    }

    let mut work = Work { nodes: Vec::new(), edges: Vec::new() };
    let add_node = |work: &mut Work, ks: &[usize]| {
        let mut p = [0.0; 3];
        let mut r: f64 = 0.0;
        for &k in ks {
            let [x, y, z] = coords(voxels[k]);
            p = geom::add(p, grid.center(x, y, z));
            r = r.max(radius_at(voxels[k]));
        }
        work.nodes.push(Some((geom::scale(p, 1.0 / ks.len() as f64), r)));
    };
    for m in &members {
        add_node(&mut work, m);
    }

    let center_of = |k: usize| {
        let [x, y, z] = coords(voxels[k]);
        grid.center(x, y, z)
    };
    let mut visited = vec![false; voxels.len()];
    let mut ports: HashSet<(usize, usize)> = HashSet::new();
    let mut trace = |work: &mut Work, node_of: &[usize], visited: &mut Vec<bool>, start: usize, first: usize| {
        if !ports.insert((start, first)) {
            return;
        }
        let mut path = Vec::new();
        let mut prev = start;
        let mut cur = first;
        while node_of[cur] == usize::MAX {
            visited[cur] = true;
            path.push(cur);
            let next = nbrs[cur].iter().map(|&w| slot[w]).find(|&w| w != prev);
            match next {
                Some(n) => {
                    prev = cur;
                    cur = n;
                }
                None => break,
            }
            if cur == first {
                break;
            }
        }
        if node_of[cur] == usize::MAX {
            return;
        }
        ports.insert((cur, prev));
        let (a, b) = (node_of[start], node_of[cur]);
        if a == b && path.len() < 3 {
            return;
        }
        let pa = work.nodes[a].unwrap();
        let pb = work.nodes[b].unwrap();
        let mut poly = vec![pa.0];
        let mut radii = vec![pa.1];
        for &k in &path {
            poly.push(center_of(k));
            radii.push(radius_at(voxels[k]));
        }
        poly.push(pb.0);
        radii.push(pb.1);
        work.edges.push(Some(WEdge { a, b, poly, radii }));
    };

    for k in 0..voxels.len() {
        if node_of[k] == usize::MAX {
            continue;
        }
        for &w in &nbrs[k] {
            let n = slot[w];
            if node_of[n] != usize::MAX && node_of[n] == node_of[k] {
                continue;
            }
            trace(&mut work, &node_of, &mut visited, k, n);
        }
    }
    // closed rings with no junction or endpoint
    for k in 0..voxels.len() {
        if node_of[k] != usize::MAX || visited[k] {
            continue;
        }
        let id = work.nodes.len();
        add_node(&mut work, &[k]);
        node_of[k] = id;
        visited[k] = true;
        let first = slot[nbrs[k][0]];
        trace(&mut work, &node_of, &mut visited, k, first);
    }

    loop {
        while work.prune_spurs(cfg.spur_factor) {
            work.merge_chains();
        }
        work.merge_chains();
        if !work.open_short_cycle(cfg.min_cycle_factor) {
            break;
        }
    }

    for e in work.edges.iter_mut().flatten() {
        laplacian_smooth(&mut e.poly, cfg.smoothing_passes);
    }

    if cfg.refine_junctions {
        refine_junctions(&mut work, s);
    }
    if cfg.extend_terminals {
        extend_terminals(&mut work, distance, s);
    }

    // compact ids and drop degenerate edges
    let mut meta_max = grid.origin;
    for k in 0..3 {
        meta_max[k] += grid.dims[k] as f64 * grid.spacing[k];
    }
    let mut graph = VascularGraph::new(GraphMeta { region_min: grid.origin, region_max: meta_max, seed: 0 });
    let mut remap = vec![usize::MAX; work.nodes.len()];
    for (i, n) in work.nodes.iter().enumerate() {
        if let Some((p, _)) = n {
            remap[i] = graph.add_node(*p);
        }
    }
    for e in work.edges.iter().flatten() {
        if !(e.length() > 0.0) {
            continue;
        }
        let radii_um = e.radii.iter().map(|r| r * 1e3).collect();
        graph.add_edge(remap[e.a], remap[e.b], e.poly.clone(), radii_um);
    }
    graph
}

/// Point at arc length `t` along `poly`, with the interpolated radius.
fn point_at(poly: &[P3], radii: &[f64], t: f64) -> Option<(usize, P3, f64)> {
    let mut travelled = 0.0;
    for i in 1..poly.len() {
        let l = geom::dist(poly[i - 1], poly[i]);
        if travelled + l >= t && l > 0.0 {
            let f = (t - travelled) / l;
            return Some((i, geom::lerp(poly[i - 1], poly[i], f), radii[i - 1] + f * (radii[i] - radii[i - 1])));
        }
        travelled += l;
    }
    None
}

fn refine_junctions(work: &mut Work, s: f64) {
    let deg = work.degrees();
    for n in 0..work.nodes.len() {
        let Some((p, r)) = work.nodes[n] else { continue };
        if deg[n] < 3 {
            continue;
        }
        let inc = work.incident(n);
        if inc.iter().any(|&i| work.edges[i].as_ref().is_some_and(|e| e.a == e.b)) {
            continue;
        }
        let near = 1.5 * r + s;
        let far = near + 2.0 * r.max(s);
        // each branch as (edge index, cut index, cut point, cut radius, axis direction)
        let mut axes = Vec::new();
        for &i in &inc {
            let mut e = work.edges[i].clone().unwrap();
            if e.a != n {
                e = e.reversed();
            }
            if e.length() < far + s {
                continue;
            }
            let (Some(a), Some(b)) = (point_at(&e.poly, &e.radii, near), point_at(&e.poly, &e.radii, far)) else {
                continue;
            };
            axes.push((i, a, geom::normalize(geom::sub(b.1, a.1))));
        }
        if axes.len() < 2 {
            continue;
        }
        // least-squares point closest to all axis lines
        let mut m = nalgebra::Matrix3::<f64>::zeros();
        let mut rhs = nalgebra::Vector3::<f64>::zeros();
        for (_, a, d) in &axes {
            let d = nalgebra::Vector3::from(*d);
            let proj = nalgebra::Matrix3::identity() - d * d.transpose();
            m += proj;
            rhs += proj * nalgebra::Vector3::from(a.1);
        }
        let Some(x) = m.try_inverse().map(|inv| inv * rhs) else { continue };
        let x: P3 = [x[0], x[1], x[2]];
        if geom::dist(x, p) > 3.0 * r || !x.iter().all(|v| v.is_finite()) {
            continue;
        }
        for &(i, (cut, point, radius), _) in &axes {
            let mut e = work.edges[i].take().unwrap();
            if e.a != n {
                e = e.reversed();
            }
            let mut poly = vec![x, point];
            poly.extend_from_slice(&e.poly[cut..]);
            let mut radii = vec![r, radius];
            radii.extend_from_slice(&e.radii[cut..]);
            e.poly = poly;
            e.radii = radii;
            work.edges[i] = Some(e);
        }
        for &i in &inc {
            if axes.iter().any(|a| a.0 == i) {
                continue;
            }
            let e = work.edges[i].as_mut().unwrap();
            if e.a == n {
                e.poly[0] = x;
            } else {
                *e.poly.last_mut().unwrap() = x;
            }
        }
        work.nodes[n] = Some((x, r));
    }
}

/// Moves each degree-1 node outward along its end tangent until the ray
/// leaves the foreground.
fn extend_terminals(work: &mut Work, distance: &Volume<f64>, s: f64) {
    let deg = work.degrees();
    let grid = &distance.grid;
    let inside = |p: P3| {
        let v = grid.to_voxel(p);
        let (x, y, z) = (v[0].round() as i64, v[1].round() as i64, v[2].round() as i64);
        grid.contains(x, y, z) && distance.data[grid.index(x as usize, y as usize, z as usize)] > 0.0
    };
    for n in 0..work.nodes.len() {
        if deg[n] != 1 || work.nodes[n].is_none() {
            continue;
        }
        let Some(ei) = work.incident(n).first().copied() else { continue };
        let mut e = work.edges[ei].take().unwrap();
        if e.b != n {
            e = e.reversed();
        }
        let end = *e.poly.last().unwrap();
        let reach = (3.0 * s).max(2.0 * e.radii.last().copied().unwrap_or(s));
        let mut back = end;
        let mut travelled = 0.0;
        for w in e.poly.windows(2).rev() {
            let l = geom::dist(w[0], w[1]);
            if travelled + l >= reach && l > 0.0 {
                back = geom::lerp(w[1], w[0], (reach - travelled) / l);
                break;
            }
            travelled += l;
            back = w[0];
        }
        let dir = geom::normalize(geom::sub(end, back));
        if geom::norm(dir) == 0.0 {
            work.edges[ei] = Some(e);
            continue;
        }
        let step = 0.25 * s;
        let mut t = 0.0;
        while inside(geom::add(end, geom::scale(dir, t + step))) {
            t += step;
        }
        let t = t + 0.5 * step;
        if t > 0.5 * s {
            let p = geom::add(end, geom::scale(dir, t));
            let r = *e.radii.last().unwrap();
            e.poly.push(p);
            e.radii.push(r);
            work.nodes[n] = Some((p, work.nodes[n].unwrap().1));
        }
        work.edges[ei] = Some(e);
    }
}
