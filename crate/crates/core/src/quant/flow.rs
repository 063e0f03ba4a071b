//! Poiseuille network resistance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom;
use crate::graph::{Edge, VascularGraph};

/// Blood viscosity used when none is configured, Pa·s.
pub const DEFAULT_VISCOSITY: f64 = 3.5e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hemodynamics {
    pub inlet: usize,
    pub outlet: usize,
    /// Pa·s
    pub viscosity: f64,
    /// Pa·s/mm³; infinite when inlet and outlet are disconnected.
    #[serde(with = "crate::sentinel")]
    pub network_resistance: f64,
    /// `(1 / R) / region volume`.
    #[serde(with = "crate::sentinel")]
    pub perfusion_index: f64,
    pub disconnected: bool,
    /// `‖A p − b‖∞ / ‖b‖∞` of the Kirchhoff solve.
    pub residual: f64,
}

/// Series resistance of one edge: `Σ 8 μ l / (π r⁴)` over its polyline
/// segments, with the mean radius of each segment. Lengths in mm, radii
/// converted from µm to mm.
pub fn edge_resistance(e: &Edge, viscosity: f64) -> f64 {
    (1..e.polyline.len())
        .map(|i| {
            let l = geom::dist(e.polyline[i - 1], e.polyline[i]);
            let r = 0.5 * (e.radii_um[i - 1] + e.radii_um[i]) * 1e-3;
            8.0 * viscosity * l / (std::f64::consts::PI * r.powi(4))
        })
        .sum()
}

/// Total resistance between `inlet` and `outlet` under a unit pressure
/// drop, from Kirchhoff balance at the free nodes of their component.
pub fn network_resistance(
    graph: &VascularGraph,
    inlet: usize,
    outlet: usize,
    viscosity: f64,
    region_volume: f64,
) -> Result<Hemodynamics> {
    let n = graph.nodes.len();
    if inlet >= n || outlet >= n {
        return Err(Error::Parameter(format!("inlet {inlet} / outlet {outlet} out of range ({n} nodes)")));
    }
    if inlet == outlet {
        return Err(Error::Parameter("inlet and outlet must differ".into()));
    }
    if !(viscosity > 0.0) {
        return Err(Error::Parameter("viscosity must be positive".into()));
    }
    let labels = graph.component_labels();
    let mut out = Hemodynamics {
        inlet,
        outlet,
        viscosity,
        network_resistance: f64::INFINITY,
        perfusion_index: 0.0,
        disconnected: true,
        residual: 0.0,
    };
    if labels[inlet] != labels[outlet] {
        return Ok(out);
    }
    let comp = labels[inlet];
    // free nodes get consecutive unknown indices
    let mut unknown = vec![usize::MAX; n];
    let mut m = 0;
    for v in 0..n {
        if labels[v] == comp && v != inlet && v != outlet {
            unknown[v] = m;
            m += 1;
        }
    }
    let pressure_of = |v: usize| if v == inlet { 1.0 } else { 0.0 };
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut b = DVector::<f64>::zeros(m);
    let mut conductances = Vec::new();
    for e in &graph.edges {
        if labels[e.a] != comp || e.a == e.b {
            continue;
        }
        let g = 1.0 / edge_resistance(e, viscosity);
        conductances.push((e.a, e.b, g));
        match (unknown[e.a], unknown[e.b]) {
            (usize::MAX, usize::MAX) => {}
            (i, usize::MAX) => {
                a[(i, i)] += g;
                b[i] += g * pressure_of(e.b);
            }
            (usize::MAX, j) => {
                a[(j, j)] += g;
                b[j] += g * pressure_of(e.a);
            }
            (i, j) => {
                a[(i, i)] += g;
                a[(j, j)] += g;
                a[(i, j)] -= g;
                a[(j, i)] -= g;
            }
        }
    }
    let p = if m == 0 {
        DVector::zeros(0)
    } else {
        let chol = a.clone().cholesky().ok_or_else(|| Error::Numerical("Kirchhoff system is singular".into()))?;
        chol.solve(&b)
    };
    let bnorm = if m == 0 { 0.0 } else { b.amax() };
    out.residual = if bnorm > 0.0 { (&a * &p - &b).amax() / bnorm } else { 0.0 };
    let pressure = |v: usize| if unknown[v] == usize::MAX { pressure_of(v) } else { p[unknown[v]] };
    let mut q = 0.0;
    for &(u, v, g) in &conductances {
        if u == inlet {
            q += g * (1.0 - pressure(v));
        } else if v == inlet {
            q += g * (1.0 - pressure(u));
        }
    }
    out.disconnected = false;
    out.network_resistance = if q > 0.0 { 1.0 / q } else { f64::INFINITY };
    out.perfusion_index = if q > 0.0 { q / region_volume } else { 0.0 };
    Ok(out)
}

/// Default boundary nodes: the free end of the widest terminal edge as
/// inlet, and the terminal farthest from it in the same component as
/// outlet.
pub fn pick_inlet_outlet(graph: &VascularGraph) -> Option<(usize, usize)> {
    let deg = graph.degrees();
    let labels = graph.component_labels();
    let mut best: Option<(f64, usize)> = None;
    for e in &graph.edges {
        for &end in &[e.a, e.b] {
            if deg[end] == 1 {
                let r = e.mean_radius_um();
                if best.is_none_or(|(br, bn)| r > br || (r == br && end < bn)) {
                    best = Some((r, end));
                }
            }
        }
    }
    let (_, inlet) = best?;
    let p = graph.nodes[inlet].position;
    let mut outlet: Option<(f64, usize)> = None;
    for v in 0..graph.nodes.len() {
        if v == inlet || deg[v] != 1 || labels[v] != labels[inlet] {
            continue;
        }
        let d = geom::dist(p, graph.nodes[v].position);
        if outlet.is_none_or(|(bd, _)| d > bd) {
            outlet = Some((d, v));
        }
    }
    outlet.map(|(_, o)| (inlet, o))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphMeta;

    fn meta() -> GraphMeta {
        GraphMeta { region_min: [0.0; 3], region_max: [2.0; 3], seed: 0 }
    }

    #[test]
    fn single_tube_matches_closed_form() {
        let mut g = VascularGraph::new(meta());
        let a = g.add_node([0.5, 1.0, 1.0]);
        let b = g.add_node([1.5, 1.0, 1.0]);
        g.add_straight_edge(a, b, 20.0);
        let h = network_resistance(&g, a, b, 3.5e-3, 8.0).unwrap();
        let r = 0.02f64;
        let want = 8.0 * 3.5e-3 * 1.0 / (std::f64::consts::PI * r.powi(4));
        assert!((h.network_resistance - want).abs() / want < 1e-12);
    }

    #[test]
    fn parallel_and_series() {
        let mut single = VascularGraph::new(meta());
        let a = single.add_node([0.5, 1.0, 1.0]);
        let b = single.add_node([1.5, 1.0, 1.0]);
        single.add_straight_edge(a, b, 20.0);
        let r = network_resistance(&single, a, b, 1e-3, 1.0).unwrap().network_resistance;

        let mut par = single.clone();
        par.add_straight_edge(a, b, 20.0);
        let rp = network_resistance(&par, a, b, 1e-3, 1.0).unwrap().network_resistance;
        assert!((rp - r / 2.0).abs() / r < 1e-9);

        let mut ser = VascularGraph::new(meta());
        let a = ser.add_node([0.0, 1.0, 1.0]);
        let m = ser.add_node([1.0, 1.0, 1.0]);
        let b = ser.add_node([2.0, 1.0, 1.0]);
        ser.add_straight_edge(a, m, 20.0);
        ser.add_straight_edge(m, b, 20.0);
        let h = network_resistance(&ser, a, b, 1e-3, 1.0).unwrap();
        assert!((h.network_resistance - 2.0 * r).abs() / r < 1e-9);
        assert!(h.residual < 1e-10);
    }

    #[test]
    fn disconnected_is_infinite() {
        let mut g = VascularGraph::new(meta());
        let a = g.add_node([0.1, 1.0, 1.0]);
        let b = g.add_node([0.6, 1.0, 1.0]);
        let c = g.add_node([1.1, 1.0, 1.0]);
        let d = g.add_node([1.6, 1.0, 1.0]);
        g.add_straight_edge(a, b, 10.0);
        g.add_straight_edge(c, d, 10.0);
        let h = network_resistance(&g, a, d, 1e-3, 1.0).unwrap();
        assert!(h.disconnected && h.network_resistance.is_infinite());
        let json = serde_json::to_string(&h).unwrap();
        assert!(json.contains("\"inf\""));
        let back: Hemodynamics = serde_json::from_str(&json).unwrap();
        assert!(back.network_resistance.is_infinite());
    }
}
