//! Centerline network representation shared by phantoms and reconstructions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, P3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    #[serde(rename = "p")]
    pub position: P3,
}

/// Edge between nodes `a` and `b`. The polyline runs from `a` to `b`;
/// radii are per polyline vertex, in micrometres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: usize,
    pub a: usize,
    pub b: usize,
    #[serde(rename = "poly")]
    pub polyline: Vec<P3>,
    #[serde(rename = "r")]
    pub radii_um: Vec<f64>,
}

impl Edge {
    pub fn length(&self) -> f64 {
        geom::polyline_length(&self.polyline)
    }

    /// Length-weighted mean radius in micrometres.
    pub fn mean_radius_um(&self) -> f64 {
        let mut acc = 0.0;
        let mut len = 0.0;
        for i in 1..self.polyline.len() {
            let l = geom::dist(self.polyline[i - 1], self.polyline[i]);
            acc += 0.5 * (self.radii_um[i - 1] + self.radii_um[i]) * l;
            len += l;
        }
        if len > 0.0 {
            acc / len
        } else {
            self.radii_um.iter().sum::<f64>() / self.radii_um.len().max(1) as f64
        }
    }

    /// Unit tangent leaving `node` along this edge, measured over `reach` mm
    /// of arc (or the whole edge when shorter).
    pub fn outgoing_tangent(&self, node: usize, reach: f64) -> P3 {
        let forward = self.a == node;
        let pts: Vec<P3> = if forward { self.polyline.clone() } else { self.polyline.iter().rev().copied().collect() };
        let start = pts[0];
        let mut travelled = 0.0;
        let mut target = *pts.last().unwrap();
        for w in pts.windows(2) {
            let l = geom::dist(w[0], w[1]);
            if travelled + l >= reach && l > 0.0 {
                target = geom::lerp(w[0], w[1], (reach - travelled) / l);
                break;
            }
            travelled += l;
        }
        geom::normalize(geom::sub(target, start))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub region_min: P3,
    pub region_max: P3,
    pub seed: u64,
}

impl GraphMeta {
    pub fn region_volume(&self) -> f64 {
        (0..3).map(|i| self.region_max[i] - self.region_min[i]).product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VascularGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub meta: GraphMeta,
}

impl VascularGraph {
    pub fn new(meta: GraphMeta) -> Self {
        Self { nodes: Vec::new(), edges: Vec::new(), meta }
    }

    pub fn add_node(&mut self, p: P3) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node { id, position: p });
        id
    }

    pub fn add_edge(&mut self, a: usize, b: usize, polyline: Vec<P3>, radii_um: Vec<f64>) -> usize {
        let id = self.edges.len();
        self.edges.push(Edge { id, a, b, polyline, radii_um });
        id
    }

    /// Straight two-vertex edge with constant radius.
    pub fn add_straight_edge(&mut self, a: usize, b: usize, radius_um: f64) -> usize {
        let pa = self.nodes[a].position;
        let pb = self.nodes[b].position;
        self.add_edge(a, b, vec![pa, pb], vec![radius_um, radius_um])
    }

    /// Checks the structural invariants: ids are dense indices, edge endpoints
    /// exist and coincide with their polyline ends, radii are positive, every
    /// vertex lies in the region and no edge has zero length.
    pub fn validate(&self) -> Result<()> {
        const TOL: f64 = 1e-9;
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Config(format!("node {i} carries id {}", n.id)));
            }
        }
        let inside =
            |p: P3| (0..3).all(|k| p[k] >= self.meta.region_min[k] - TOL && p[k] <= self.meta.region_max[k] + TOL);
        for (i, e) in self.edges.iter().enumerate() {
            if e.id != i {
                return Err(Error::Config(format!("edge {i} carries id {}", e.id)));
            }
            if e.a >= self.nodes.len() || e.b >= self.nodes.len() {
                return Err(Error::Config(format!("edge {i} references a missing node")));
            }
            if e.polyline.len() < 2 || e.radii_um.len() != e.polyline.len() {
                return Err(Error::Config(format!(
                    "edge {i}: {} vertices, {} radii",
                    e.polyline.len(),
                    e.radii_um.len()
                )));
            }
            if geom::dist(e.polyline[0], self.nodes[e.a].position) > TOL
                || geom::dist(*e.polyline.last().unwrap(), self.nodes[e.b].position) > TOL
            {
                return Err(Error::Config(format!("edge {i}: polyline ends off its nodes")));
            }
            if e.radii_um.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::Config(format!("edge {i}: non-positive radius")));
            }
            if !e.polyline.iter().all(|&p| inside(p)) {
                return Err(Error::Config(format!("edge {i}: vertex outside region")));
            }
            if !(e.length() > 0.0) {
                return Err(Error::Config(format!("edge {i}: zero length")));
            }
        }
        Ok(())
    }

    /// Node degrees; a self-loop contributes two.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for e in &self.edges {
            deg[e.a] += 1;
            deg[e.b] += 1;
        }
        deg
    }

    pub fn total_length(&self) -> f64 {
        self.edges.iter().map(Edge::length).sum()
    }

    /// Connected-component label per node.
    pub fn component_labels(&self) -> Vec<usize> {
        let mut uf = UnionFind::new(self.nodes.len());
        for e in &self.edges {
            uf.union(e.a, e.b);
        }
        let mut label = vec![usize::MAX; self.nodes.len()];
        let mut next = 0;
        let mut out = Vec::with_capacity(self.nodes.len());
        for i in 0..self.nodes.len() {
            let r = uf.find(i);
            if label[r] == usize::MAX {
                label[r] = next;
                next += 1;
            }
            out.push(label[r]);
        }
        out
    }

    pub fn components(&self) -> usize {
        self.component_labels().iter().copied().max().map_or(0, |m| m + 1)
    }

    /// First Betti number `E - V + C`.
    pub fn cycles(&self) -> usize {
        (self.edges.len() + self.components()).saturating_sub(self.nodes.len())
    }

    /// Uniformly scales coordinates and radii by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut g = self.clone();
        for n in &mut g.nodes {
            n.position = geom::scale(n.position, factor);
        }
        for e in &mut g.edges {
            e.polyline.iter_mut().for_each(|p| *p = geom::scale(*p, factor));
            e.radii_um.iter_mut().for_each(|r| *r *= factor);
        }
        g.meta.region_min = geom::scale(g.meta.region_min, factor);
        g.meta.region_max = geom::scale(g.meta.region_max, factor);
        g
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

/// Morphological and topological summary of a centerline graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Morphometrics {
    /// mm
    pub total_length: f64,
    /// mm / mm³
    pub vessel_density: f64,
    /// µm, length-weighted mean of 2r
    pub mean_diameter: f64,
    /// mm²
    pub surface_area: f64,
    /// degrees, one per junction
    pub branch_angles: Vec<f64>,
    pub mean_branch_angle: f64,
    pub components: usize,
    pub cycles: usize,
}

/// Measures a graph. Tangents at junctions are taken over `reach_factor`
/// times each edge's mean radius.
pub fn morphometrics(graph: &VascularGraph, region_volume: f64, reach_factor: f64) -> Morphometrics {
    let mut total_length = 0.0;
    let mut diameter_acc = 0.0;
    let mut surface_area = 0.0;
    for e in &graph.edges {
        for i in 1..e.polyline.len() {
            let l = geom::dist(e.polyline[i - 1], e.polyline[i]);
            let r_um = 0.5 * (e.radii_um[i - 1] + e.radii_um[i]);
            total_length += l;
            diameter_acc += 2.0 * r_um * l;
            surface_area += 2.0 * std::f64::consts::PI * (r_um * 1e-3) * l;
        }
    }
    let mean_diameter = if total_length > 0.0 { diameter_acc / total_length } else { 0.0 };

    let mut incident: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph.nodes.len()];
    for e in &graph.edges {
        incident[e.a].push((e.id, e.a));
        incident[e.b].push((e.id, e.b));
    }
    let mut branch_angles = Vec::new();
    for (n, inc) in incident.iter().enumerate() {
        if inc.len() < 3 {
            continue;
        }
        let tangents: Vec<P3> = inc
            .iter()
            .enumerate()
            .map(|(k, &(eid, _))| {
                let e = &graph.edges[eid];
                let reach = reach_factor * e.mean_radius_um() * 1e-3;
                // self-loops appear twice; the second occurrence leaves via b
                if e.a == e.b && inc[..k].iter().any(|&(x, _)| x == eid) {
                    let mut rev = e.clone();
                    rev.polyline.reverse();
                    rev.radii_um.reverse();
                    rev.outgoing_tangent(n, reach)
                } else {
                    e.outgoing_tangent(n, reach)
                }
            })
            .collect();
        let mut best = f64::INFINITY;
        for i in 0..tangents.len() {
            for j in i + 1..tangents.len() {
                best = best.min(geom::angle_deg(tangents[i], tangents[j]));
            }
        }
        branch_angles.push(best);
    }
    let mean_branch_angle =
        if branch_angles.is_empty() { 0.0 } else { branch_angles.iter().sum::<f64>() / branch_angles.len() as f64 };
    Morphometrics {
        total_length,
        vessel_density: if region_volume > 0.0 { total_length / region_volume } else { 0.0 },
        mean_diameter,
        surface_area,
        branch_angles,
        mean_branch_angle,
        components: graph.components(),
        cycles: graph.cycles(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> GraphMeta {
        GraphMeta { region_min: [-1.0; 3], region_max: [1.0; 3], seed: 0 }
    }

    #[test]
    fn y_junction_angle_is_ninety() {
        let mut g = VascularGraph::new(meta());
        let c = g.add_node([0.0, 0.0, 0.0]);
        let p = g.add_node([-0.5, -0.5, 0.0]);
        let a = g.add_node([0.5, 0.0, 0.0]);
        let b = g.add_node([0.0, 0.5, 0.0]);
        g.add_straight_edge(p, c, 30.0);
        g.add_straight_edge(c, a, 25.0);
        g.add_straight_edge(c, b, 25.0);
        g.validate().unwrap();
        let m = morphometrics(&g, 8.0, 3.0);
        assert_eq!(m.branch_angles.len(), 1);
        assert!((m.branch_angles[0] - 90.0).abs() < 1e-9);
        assert_eq!(m.components, 1);
        assert_eq!(m.cycles, 0);
    }

    #[test]
    fn cycles_and_components() {
        let mut g = VascularGraph::new(meta());
        let n: Vec<usize> = (0..6).map(|i| g.add_node([i as f64 * 0.1, 0.0, 0.0])).collect();
        g.add_straight_edge(n[0], n[1], 10.0);
        g.add_straight_edge(n[1], n[2], 10.0);
        g.add_edge(n[2], n[0], vec![[0.2, 0.0, 0.0], [0.1, 0.1, 0.0], [0.0, 0.0, 0.0]], vec![10.0; 3]);
        g.add_straight_edge(n[3], n[4], 10.0);
        assert_eq!(g.components(), 3);
        assert_eq!(g.cycles(), 1);
    }

    #[test]
    fn json_wire_format() {
        let mut g = VascularGraph::new(meta());
        let a = g.add_node([0.0, 0.0, 0.0]);
        let b = g.add_node([0.5, 0.0, 0.0]);
        g.add_straight_edge(a, b, 20.0);
        let v: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();
        assert_eq!(v["nodes"][1]["p"][0], 0.5);
        assert_eq!(v["edges"][0]["a"], 0);
        assert_eq!(v["edges"][0]["poly"][1][0], 0.5);
        assert_eq!(v["edges"][0]["r"][0], 20.0);
        assert!(v["meta"].is_object());
        let back = VascularGraph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn validation_catches_broken_edges() {
        let mut g = VascularGraph::new(meta());
        let a = g.add_node([0.0, 0.0, 0.0]);
        let b = g.add_node([0.5, 0.0, 0.0]);
        g.add_edge(a, b, vec![[0.0, 0.0, 0.0], [0.4, 0.0, 0.0]], vec![1.0, 1.0]);
        assert!(g.validate().is_err());
        let mut g2 = VascularGraph::new(meta());
        let a = g2.add_node([0.0, 0.0, 0.0]);
        g2.add_edge(a, a, vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], vec![1.0, 1.0]);
        assert!(g2.validate().is_err());
    }
}
