//! Procedural vascular phantoms with exactly known geometry.
//!
//! Trees grow by recursive bifurcation: each tip either stops or splits into
//! two children whose radii obey `r_parent^k = r_1^k + r_2^k`. Children leave
//! inside a cone around the parent tangent, on opposite sides of it. Candidate
//! segments that leave the region or come closer than the configured clearance
//! to an existing vessel are resampled; a split that cannot be placed is
//! abandoned, so every bifurcation has exactly two children. Anastomoses join
//! the nearest pair of leaves of one tree that do not share a parent.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, P3};
use crate::graph::{morphometrics, GraphMeta, VascularGraph};
use crate::rng;
use crate::volume::{Grid, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Region size in mm (x, y, z); the region spans `[0, size]`.
    pub region_mm: [f64; 3],
    /// Number of bifurcation levels below the root segment.
    pub depth: u32,
    pub branch_probability: f64,
    /// Murray exponent `k`.
    pub radius_exponent: f64,
    pub root_radius_um: f64,
    /// Uniform bounds for segment lengths, mm.
    pub segment_length_mm: [f64; 2],
    /// Anastomoses to insert.
    pub loops: usize,
    /// Independent trees (connected components).
    pub trees: usize,
    pub cone_half_angle_deg: f64,
    /// Minimum surface-to-surface gap between vessels that do not share a node, µm.
    pub clearance_um: f64,
    /// 0 splits flow evenly; 1 allows any split fraction in (0, 1).
    pub split_asymmetry: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            region_mm: [1.28; 3],
            depth: 3,
            branch_probability: 1.0,
            radius_exponent: 3.0,
            root_radius_um: 60.0,
            segment_length_mm: [0.18, 0.3],
            loops: 0,
            trees: 1,
            cone_half_angle_deg: 40.0,
            clearance_um: 30.0,
            split_asymmetry: 0.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.region_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("region_mm must be positive, got {:?}", self.region_mm)));
        }
        if !(self.root_radius_um > 0.0) {
            return Err(Error::Config("root_radius_um must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.branch_probability) {
            return Err(Error::Config("branch_probability must lie in [0, 1]".into()));
        }
        if !(self.radius_exponent > 0.0) {
            return Err(Error::Config("radius_exponent must be positive".into()));
        }
        let [lo, hi] = self.segment_length_mm;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("segment_length_mm bounds invalid: {lo}..{hi}")));
        }
        if self.trees == 0 {
            return Err(Error::Config("trees must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.split_asymmetry) {
            return Err(Error::Config("split_asymmetry must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Gold-standard parameters computed from the generating geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthParams {
    /// mm / mm³
    pub vessel_density: f64,
    /// µm
    pub mean_diameter: f64,
    /// mm²
    pub surface_area: f64,
    /// degrees
    pub mean_branch_angle: f64,
    pub components: usize,
    pub cycles: usize,
    /// mm
    pub total_length: f64,
}

const ROOT_ATTEMPTS: usize = 400;
const CHILD_ATTEMPTS: usize = 200;
const TREE_ATTEMPTS: usize = 20;

struct Growth {
    graph: VascularGraph,
    tree_of: Vec<usize>,
    parent_of: Vec<Option<usize>>,
    roots: Vec<usize>,
    clearance: f64,
    size: P3,
}

impl Growth {
    fn inside(&self, p: P3, margin: f64) -> bool {
        (0..3).all(|k| p[k] >= margin && p[k] <= self.size[k] - margin)
    }

    /// Smallest surface gap minus clearance against edges not touching `skip`.
    fn slack(&self, a: P3, b: P3, radius: f64, skip: &[usize]) -> f64 {
        let mut slack = f64::INFINITY;
        for e in &self.graph.edges {
            if skip.contains(&e.a) || skip.contains(&e.b) {
                continue;
            }
            let r_e = e.radii_um.iter().cloned().fold(0.0, f64::max) * 1e-3;
            for w in e.polyline.windows(2) {
                let d = geom::segment_segment(a, b, w[0], w[1]);
                slack = slack.min(d - radius - r_e - self.clearance);
            }
        }
        slack
    }

    fn add_node(&mut self, p: P3, tree: usize, parent: Option<usize>) -> usize {
        self.tree_of.push(tree);
        self.parent_of.push(parent);
        self.graph.add_node(p)
    }
}

fn random_unit(rng: &mut rng::Rng) -> P3 {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = geom::norm(v);
        if n > 1e-3 && n <= 1.0 {
            return geom::scale(v, 1.0 / n);
        }
    }
}

/// Grows a seeded phantom network.
pub fn generate_network(config: &PhantomConfig) -> Result<VascularGraph> {
    config.validate()?;
    let mut rng = rng::rng(config.seed);
    let size = config.region_mm;
    let mut g = Growth {
        graph: VascularGraph::new(GraphMeta { region_min: [0.0; 3], region_max: size, seed: config.seed }),
        tree_of: Vec::new(),
        parent_of: Vec::new(),
        roots: Vec::new(),
        clearance: config.clearance_um * 1e-3,
        size,
    };
    let k = config.radius_exponent;
    let cone = config.cone_half_angle_deg.to_radians();
    let [len_lo, len_hi] = config.segment_length_mm;

    for tree in 0..config.trees {
        for tree_attempt in 0..TREE_ATTEMPTS {
            let mark = (g.graph.nodes.len(), g.graph.edges.len(), g.roots.len());
            let mut complete = true;
            let r = config.root_radius_um * 1e-3;
            let mut placed = None;
            for _ in 0..ROOT_ATTEMPTS {
                // roots enter through a random face, heading inward
                let axis = rng.random_range(0..3usize);
                let high = rng.random_range(0.0..1.0) < 0.5;
                let mut start = [0.0; 3];
                for k in 0..3 {
                    start[k] = rng.random_range(0.25..0.75) * size[k];
                }
                start[axis] = if high { size[axis] - r } else { r };
                let mut inward = [0.0; 3];
                inward[axis] = if high { -1.0 } else { 1.0 };
                let tilt = geom::rotate(inward, geom::any_perpendicular(inward), rng.random_range(0.0..cone));
                let dir = geom::normalize(geom::rotate(tilt, inward, rng.random_range(0.0..std::f64::consts::TAU)));
                let len = rng.random_range(len_lo..=len_hi);
                let end = geom::add(start, geom::scale(dir, len));
                if !g.inside(start, r * (1.0 - 1e-9)) || !g.inside(end, r) {
                    continue;
                }
                if g.slack(start, end, r, &[]) < 0.0 {
                    continue;
                }
                placed = Some((start, end, dir));
                break;
            }
            let Some((start, end, dir)) = placed else {
                return Err(Error::Config(format!(
                    "region {:?} mm too small to place root segment of tree {tree}",
                    size
                )));
            };
            let a = g.add_node(start, tree, None);
            let b = g.add_node(end, tree, Some(a));
            g.graph.add_straight_edge(a, b, config.root_radius_um);
            g.roots.push(a);

            // breadth-first growth keeps the random stream order independent of depth
            let mut frontier = vec![(b, dir, config.root_radius_um)];
            for _level in 0..config.depth {
                let mut next = Vec::new();
                for (node, tangent, radius_um) in frontier {
                    if rng.random_range(0.0..1.0) >= config.branch_probability {
                        continue;
                    }
                    let frac = 0.5 + config.split_asymmetry * (rng.random_range(0.0..1.0) - 0.5);
                    let radii = [radius_um * frac.powf(1.0 / k), radius_um * (1.0 - frac).powf(1.0 / k)];
                    let base = g.graph.nodes[node].position;
                    // after half the attempts fail, tilt the cone axis toward the region centre
                    let inward = geom::normalize(geom::sub(geom::scale(size, 0.5), base));
                    let steered = geom::normalize(geom::add(tangent, inward));
                    let mut chosen = None;
                    for attempt in 0..CHILD_ATTEMPTS {
                        let tangent =
                            if attempt < CHILD_ATTEMPTS / 2 || geom::norm(steered) == 0.0 { tangent } else { steered };
                        let perp0 = geom::any_perpendicular(tangent);
                        let psi = rng.random_range(0.0..std::f64::consts::TAU);
                        let mut pair = [(base, base); 2];
                        let mut ok = true;
                        for (side, &r_um) in radii.iter().enumerate() {
                            let axis = geom::rotate(perp0, tangent, psi + side as f64 * std::f64::consts::PI);
                            let polar = rng.random_range(cone / 3.0..=cone);
                            let d = geom::normalize(geom::rotate(tangent, axis, polar));
                            let len = rng.random_range(len_lo..=len_hi);
                            let end = geom::add(base, geom::scale(d, len));
                            ok &= g.inside(end, r_um * 1e-3) && g.slack(base, end, r_um * 1e-3, &[node]) >= 0.0;
                            pair[side] = (end, d);
                        }
                        if !ok {
                            continue;
                        }
                        // siblings merge at the junction but must separate by mid-length
                        let (e0, e1) = (pair[0].0, pair[1].0);
                        let need = (radii[0] + radii[1]) * 1e-3 + g.clearance;
                        let (m0, m1) = (geom::lerp(base, e0, 0.5), geom::lerp(base, e1, 0.5));
                        let separated = [(e0, e1), (e1, e0), (m0, e1), (m1, e0)]
                            .iter()
                            .all(|&(p, q)| geom::point_segment(p, base, q).1 >= need);
                        if separated {
                            chosen = Some(pair);
                            break;
                        }
                    }
                    if chosen.is_none() {
                        complete = false;
                    }
                    if let Some(pair) = chosen {
                        for (side, (end, d)) in pair.into_iter().enumerate() {
                            let c = g.add_node(end, tree, Some(node));
                            g.graph.add_straight_edge(node, c, radii[side]);
                            next.push((c, d, radii[side]));
                        }
                    }
                }
                frontier = next;
            }
            if complete || tree_attempt + 1 == TREE_ATTEMPTS {
                break;
            }
            // a bifurcation could not be placed: regrow this tree from scratch
            g.graph.nodes.truncate(mark.0);
            g.graph.edges.truncate(mark.1);
            g.roots.truncate(mark.2);
            g.tree_of.truncate(mark.0);
            g.parent_of.truncate(mark.0);
        }
    }

    insert_loops(&mut g, config.loops, &mut rng)?;
    g.graph.validate()?;
    Ok(g.graph)
}

fn insert_loops(g: &mut Growth, loops: usize, rng: &mut rng::Rng) -> Result<()> {
    if loops == 0 {
        return Ok(());
    }
    let deg = g.graph.degrees();
    let leaves: Vec<usize> = (0..g.graph.nodes.len()).filter(|&n| deg[n] == 1 && !g.roots.contains(&n)).collect();
    let mut pairs = Vec::new();
    for (i, &u) in leaves.iter().enumerate() {
        for &v in &leaves[i + 1..] {
            if g.tree_of[u] == g.tree_of[v] && g.parent_of[u] != g.parent_of[v] {
                let d = geom::dist(g.graph.nodes[u].position, g.graph.nodes[v].position);
                pairs.push((d, u, v));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = vec![false; pairs.len()];
    for _ in 0..loops {
        let mut inserted = false;
        for (idx, &(_, u, v)) in pairs.iter().enumerate() {
            if used[idx] {
                continue;
            }
            let radius_of = |n: usize| {
                g.graph
                    .edges
                    .iter()
                    .filter(|e| e.a == n || e.b == n)
                    .map(|e| e.radii_um[0])
                    .fold(f64::INFINITY, f64::min)
            };
            let r_um = radius_of(u).min(radius_of(v));
            let r = r_um * 1e-3;
            let Some(poly) = loop_path(g, u, v, r, rng) else {
                continue;
            };
            let n = poly.len();
            g.graph.add_edge(u, v, poly, vec![r_um; n]);
            used[idx] = true;
            inserted = true;
            break;
        }
        if !inserted {
            return Err(Error::Config(format!("cannot place {loops} anastomoses with the configured clearance")));
        }
    }
    Ok(())
}

const LOOP_ATTEMPTS: usize = 40;

/// A straight or once-bent path between two leaves that keeps clearance
/// from every other vessel and stays inside the region.
fn loop_path(g: &Growth, u: usize, v: usize, r: f64, rng: &mut rng::Rng) -> Option<Vec<P3>> {
    let pu = g.graph.nodes[u].position;
    let pv = g.graph.nodes[v].position;
    if g.slack(pu, pv, r, &[u, v]) >= 0.0 {
        return Some(vec![pu, pv]);
    }
    let mid = geom::lerp(pu, pv, 0.5);
    let span = geom::dist(pu, pv);
    for _ in 0..LOOP_ATTEMPTS {
        let offset = geom::scale(random_unit(rng), span * rng.random_range(0.2..0.8));
        let m = geom::add(mid, offset);
        if !g.inside(m, r) {
            continue;
        }
        if g.slack(pu, m, r, &[u]) >= 0.0 && g.slack(m, pv, r, &[v]) >= 0.0 {
            return Some(vec![pu, m, pv]);
        }
    }
    None
}

/// Binary occupancy of the vessel tubes. A voxel is foreground when its
/// centre lies within the interpolated local radius of some polyline segment.
/// Segments are joined with round caps at shared nodes; ends at degree-1 nodes
/// are cut flat, so a free tube of length `l` covers `π r² l`.
pub fn rasterize(graph: &VascularGraph, grid: &Grid) -> Mask {
    let mut mask = Mask::zeros(grid.clone());
    let deg = graph.degrees();
    for e in &graph.edges {
        let last = e.polyline.len() - 2;
        for k in 0..=last {
            let p0 = e.polyline[k];
            let p1 = e.polyline[k + 1];
            let r0 = e.radii_um[k] * 1e-3;
            let r1 = e.radii_um[k + 1] * 1e-3;
            let flat_start = k == 0 && deg[e.a] == 1;
            let flat_end = k == last && deg[e.b] == 1;
            fill_segment(&mut mask, p0, p1, r0, r1, flat_start, flat_end);
        }
    }
    mask
}

fn fill_segment(mask: &mut Mask, p0: P3, p1: P3, r0: f64, r1: f64, flat_start: bool, flat_end: bool) {
    let grid = mask.grid.clone();
    let rmax = r0.max(r1);
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for ax in 0..3 {
        let a = p0[ax].min(p1[ax]) - rmax;
        let b = p0[ax].max(p1[ax]) + rmax;
        let ia = ((a - grid.origin[ax]) / grid.spacing[ax] - 0.5).floor();
        let ib = ((b - grid.origin[ax]) / grid.spacing[ax] - 0.5).ceil();
        let n = grid.dims[ax] as f64;
        if ib < 0.0 || ia > n - 1.0 {
            return;
        }
        lo[ax] = ia.max(0.0) as usize;
        hi[ax] = ib.min(n - 1.0) as usize;
    }
    let d = geom::sub(p1, p0);
    let len2 = geom::dot(d, d);
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let c = grid.center(x, y, z);
                let t = if len2 > 0.0 { geom::dot(geom::sub(c, p0), d) / len2 } else { 0.0 };
                if (flat_start && t < 0.0) || (flat_end && t > 1.0) {
                    continue;
                }
                let tc = t.clamp(0.0, 1.0);
                let r = r0 + (r1 - r0) * tc;
                if geom::dist(c, geom::lerp(p0, p1, tc)) <= r {
                    mask.set(x, y, z, 1);
                }
            }
        }
    }
}

/// Gold-standard parameters of a phantom over a region of `region_volume` mm³.
pub fn analytic_properties(graph: &VascularGraph, region_volume: f64) -> GroundTruthParams {
    let m = morphometrics(graph, region_volume, 3.0);
    GroundTruthParams {
        vessel_density: m.vessel_density,
        mean_diameter: m.mean_diameter,
        surface_area: m.surface_area,
        mean_branch_angle: m.mean_branch_angle,
        components: m.components,
        cycles: m.cycles,
        total_length: m.total_length,
    }
}

/// Sum of `π r² l` over all polyline segments (mm³), with the mean radius of
/// each segment; overlaps at junctions are counted twice.
pub fn tube_volume(graph: &VascularGraph) -> f64 {
    graph
        .edges
        .iter()
        .flat_map(|e| {
            (1..e.polyline.len()).map(move |i| {
                let r = 0.5 * (e.radii_um[i - 1] + e.radii_um[i]) * 1e-3;
                std::f64::consts::PI * r * r * geom::dist(e.polyline[i - 1], e.polyline[i])
            })
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tube(radius_um: f64, len: f64) -> VascularGraph {
        let mut g = VascularGraph::new(GraphMeta { region_min: [0.0; 3], region_max: [1.4, 0.4, 0.4], seed: 0 });
        let a = g.add_node([0.2, 0.2, 0.2]);
        let b = g.add_node([0.2 + len, 0.2, 0.2]);
        g.add_straight_edge(a, b, radius_um);
        g
    }

    #[test]
    fn depth_zero_is_single_segment() {
        let cfg = PhantomConfig { depth: 0, root_radius_um: 50.0, ..Default::default() };
        let g = generate_network(&cfg).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 1);
        assert!(g.edges[0].radii_um.iter().all(|&r| r == 50.0));
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = PhantomConfig { seed: 11, loops: 1, ..Default::default() };
        let a = generate_network(&cfg).unwrap().to_json().unwrap();
        let b = generate_network(&cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let c = generate_network(&PhantomConfig { seed: 12, ..cfg }).unwrap().to_json().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_region_is_a_config_error() {
        let cfg = PhantomConfig { region_mm: [0.1, 0.1, 0.1], ..Default::default() };
        assert!(matches!(generate_network(&cfg), Err(Error::Config(_))));
        assert!(PhantomConfig { root_radius_um: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn empty_graph_rasterizes_to_background() {
        let g = VascularGraph::new(GraphMeta { region_min: [0.0; 3], region_max: [1.0; 3], seed: 0 });
        let grid = Grid::isotropic([10, 10, 10], 0.1).unwrap();
        assert_eq!(rasterize(&g, &grid).count(), 0);
    }

    #[test]
    fn straight_tube_analytics() {
        let g = tube(32.1, 1.0);
        let p = analytic_properties(&g, 2.0);
        assert!((p.vessel_density - 0.5).abs() < 1e-12);
        assert!((p.mean_diameter - 64.2).abs() < 1e-9);
        let expected_area = 2.0 * std::f64::consts::PI * 0.0321 * 1.0;
        assert!((p.surface_area - expected_area).abs() < 1e-12);
        assert_eq!((p.components, p.cycles), (1, 0));
    }

    #[test]
    fn straight_tube_voxel_count() {
        // brute force: every voxel against the cylinder
        let g = tube(40.0, 1.0);
        let grid = Grid::isotropic([140, 40, 40], 0.01).unwrap();
        let mask = rasterize(&g, &grid);
        let mut brute = 0;
        for z in 0..40 {
            for y in 0..40 {
                for x in 0..140 {
                    let c = grid.center(x, y, z);
                    let along = c[0] - 0.2;
                    let radial = ((c[1] - 0.2).powi(2) + (c[2] - 0.2).powi(2)).sqrt();
                    if (0.0..=1.0).contains(&along) && radial <= 0.04 {
                        brute += 1;
                    }
                }
            }
        }
        assert_eq!(mask.count(), brute);
        let analytic = std::f64::consts::PI * 16.0 * 100.0;
        assert!((brute as f64 - analytic).abs() / analytic < 0.05, "{brute}");
    }
}
