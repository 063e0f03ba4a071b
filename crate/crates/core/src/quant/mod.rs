//! Centerline extraction and morphological, topological and flow
//! parameters of vessel networks.

pub mod extract;
pub mod flow;
pub mod skeleton;

pub use extract::{extract_graph, ExtractConfig};
pub use flow::{network_resistance, pick_inlet_outlet, Hemodynamics, DEFAULT_VISCOSITY};
pub use skeleton::{count_components, euler_characteristic, skeletonize};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::edt::distance_to_background;
use crate::error::{Error, Result};
use crate::graph::{morphometrics, VascularGraph};
use crate::volume::Mask;

/// Tangent reach for branch angles, in multiples of the mean edge radius.
pub const ANGLE_REACH: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub volume_id: String,
    /// (x, y, z), mm
    pub spacing_mm: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    /// mm / mm³
    pub vessel_density: f64,
    /// µm
    pub mean_diameter: f64,
    /// mm²
    pub surface_area: f64,
    /// mm
    pub total_length: f64,
    /// degrees
    pub branch_angles: Vec<f64>,
    pub mean_branch_angle: f64,
    pub nodes: usize,
    pub edges: usize,
    pub components: usize,
    pub cycles: usize,
    /// Coefficient of variation of junction degrees.
    pub branching_heterogeneity: f64,
    /// Cycles per edge.
    pub circulatory_index: f64,
    pub hemodynamics: Option<Hemodynamics>,
    /// Not computed: no definition is available for this parameter.
    pub vessel_opening_degree: Option<f64>,
    /// Fields whose definitions are local conventions rather than standard.
    pub artifact_defined: Vec<String>,
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantOptions {
    pub inlet: Option<usize>,
    pub outlet: Option<usize>,
    /// Choose inlet/outlet automatically when none are given.
    pub auto_boundary: bool,
    pub viscosity: f64,
}

impl Default for QuantOptions {
    fn default() -> Self {
        Self { inlet: None, outlet: None, auto_boundary: true, viscosity: DEFAULT_VISCOSITY }
    }
}

/// Parameters of a centerline graph over a region of `region_volume` mm³.
pub fn compute_quant(graph: &VascularGraph, region_volume: f64, opts: &QuantOptions) -> Result<QuantReport> {
    if !(region_volume > 0.0) {
        return Err(Error::Parameter("region volume must be positive".into()));
    }
    let m = morphometrics(graph, region_volume, ANGLE_REACH);
    let deg = graph.degrees();
    let junctions: Vec<f64> = deg.iter().filter(|&&d| d >= 3).map(|&d| d as f64).collect();
    let branching_heterogeneity = if junctions.is_empty() {
        0.0
    } else {
        let mean = junctions.iter().sum::<f64>() / junctions.len() as f64;
        let var = junctions.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / junctions.len() as f64;
        var.sqrt() / mean
    };
    let circulatory_index = if graph.edges.is_empty() { 0.0 } else { m.cycles as f64 / graph.edges.len() as f64 };
    let boundary = match (opts.inlet, opts.outlet) {
        (Some(i), Some(o)) => Some((i, o)),
        (None, None) if opts.auto_boundary => pick_inlet_outlet(graph),
        (None, None) => None,
        _ => return Err(Error::Parameter("inlet and outlet must be given together".into())),
    };
    let hemodynamics =
        boundary.map(|(i, o)| network_resistance(graph, i, o, opts.viscosity, region_volume)).transpose()?;
    Ok(QuantReport {
        vessel_density: m.vessel_density,
        mean_diameter: m.mean_diameter,
        surface_area: m.surface_area,
        total_length: m.total_length,
        branch_angles: m.branch_angles,
        mean_branch_angle: m.mean_branch_angle,
        nodes: graph.nodes.len(),
        edges: graph.edges.len(),
        components: m.components,
        cycles: m.cycles,
        branching_heterogeneity,
        circulatory_index,
        hemodynamics,
        vessel_opening_degree: None,
        artifact_defined: vec!["branching_heterogeneity".into(), "circulatory_index".into()],
        provenance: None,
    })
}

/// Skeletonize, extract and measure a binary volume in one call. The region
/// volume is the physical extent of the mask grid.
pub fn quantify_mask(
    mask: &Mask,
    extract: &ExtractConfig,
    opts: &QuantOptions,
    volume_id: &str,
) -> Result<(VascularGraph, QuantReport)> {
    let skeleton = skeletonize(mask);
    let dist = distance_to_background(mask);
    let graph = extract_graph(&skeleton, &dist, extract);
    let mut report = compute_quant(&graph, mask.grid.physical_volume(), opts)?;
    report.provenance = Some(Provenance { volume_id: volume_id.to_string(), spacing_mm: mask.grid.spacing });
    Ok((graph, report))
}

impl QuantReport {
    pub const CSV_HEADER: &'static str = "volume_id,vessel_density,mean_diameter,surface_area,total_length,mean_branch_angle,nodes,edges,components,cycles,branching_heterogeneity,circulatory_index,network_resistance,perfusion_index";

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let id = self.provenance.as_ref().map_or("", |p| p.volume_id.as_str());
        let (r, q) = self.hemodynamics.as_ref().map_or((String::new(), String::new()), |h| {
            (crate::sentinel::fmt(h.network_resistance), crate::sentinel::fmt(h.perfusion_index))
        });
        let _ = write!(
            s,
            "{id},{},{},{},{},{},{},{},{},{},{},{},{r},{q}",
            self.vessel_density,
            self.mean_diameter,
            self.surface_area,
            self.total_length,
            self.mean_branch_angle,
            self.nodes,
            self.edges,
            self.components,
            self.cycles,
            self.branching_heterogeneity,
            self.circulatory_index,
        );
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}
