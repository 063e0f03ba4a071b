//! Simulated multimodal SRUS slice stacks.
//!
//! A stack samples a phantom along parallel planes. Each slice carries up to
//! six channels: grayscale (PSF-blurred occupancy), flow density (occupied
//! fraction of the pixel footprint through the slice thickness), in-plane
//! flow direction, out-of-plane flow elevation, Poiseuille velocity and a
//! sparse microbubble track mask.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, P3};
use crate::graph::VascularGraph;
use crate::image::{gaussian_blur, Image};
use crate::preprocess::bspline::{apply_transform, apply_transform_nearest, BSplineTransform};
use crate::rng;
use crate::volume::{Grid, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Grayscale,
    FlowDensity,
    FlowDirection,
    FlowAngle,
    FlowVelocity,
    MicrobubbleTrack,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::Grayscale,
        Channel::FlowDensity,
        Channel::FlowDirection,
        Channel::FlowAngle,
        Channel::FlowVelocity,
        Channel::MicrobubbleTrack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Grayscale => "grayscale",
            Channel::FlowDensity => "flow_density",
            Channel::FlowDirection => "flow_direction",
            Channel::FlowAngle => "flow_angle",
            Channel::FlowVelocity => "flow_velocity",
            Channel::MicrobubbleTrack => "microbubble_track",
        }
    }

    pub fn from_name(s: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Channels whose values must not be interpolated across pixels.
    pub fn is_discrete(self) -> bool {
        matches!(self, Channel::FlowDirection | Channel::FlowAngle | Channel::MicrobubbleTrack)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    #[default]
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// (u, v) in-plane axes, with `u × v` equal to the plane normal.
    fn in_plane(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (2, 0),
            Axis::Z => (0, 1),
        }
    }
}

/// Plane pose: `origin` is the pixel-grid corner; pixel `(i, j)` has its
/// centre at `origin + (i + ½) s u + (j + ½) s v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanePose {
    pub origin: P3,
    pub normal: P3,
    pub u: P3,
    pub v: P3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub pose: PlanePose,
    /// One image per stack channel, in stack channel order.
    pub data: Vec<Image<f32>>,
    /// Plane missed the volume; all channels are zero.
    pub warning: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub width: usize,
    pub height: usize,
    pub pixel_spacing_um: f64,
    /// Channel presence mask, in canonical order.
    pub channels: Vec<Channel>,
    pub slices: Vec<Slice>,
    /// Per-slice warp applied by `corrupt`, kept for registration oracles.
    pub warps: Vec<Option<BSplineTransform>>,
    /// Per-slice grayscale statistics removed by z-scoring, if applied.
    pub normalization: Vec<Option<Normalization>>,
}

impl SliceStack {
    pub fn channel_index(&self, c: Channel) -> Option<usize> {
        self.channels.iter().position(|&x| x == c)
    }

    pub fn channel(&self, slice: usize, c: Channel) -> Option<&Image<f32>> {
        self.channel_index(c).map(|i| &self.slices[slice].data[i])
    }

    pub fn channel_mut(&mut self, slice: usize, c: Channel) -> Option<&mut Image<f32>> {
        let i = self.channel_index(c)?;
        Some(&mut self.slices[slice].data[i])
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Keeps only the listed channels.
    pub fn select(&self, channels: &[Channel]) -> Result<SliceStack> {
        let mut wanted: Vec<Channel> = channels.to_vec();
        wanted.sort();
        wanted.dedup();
        let idx: Vec<usize> = wanted
            .iter()
            .map(|&c| self.channel_index(c).ok_or_else(|| Error::Shape(format!("stack lacks channel {}", c.name()))))
            .collect::<Result<_>>()?;
        let mut out = self.clone();
        out.channels = wanted;
        for s in &mut out.slices {
            s.data = idx.iter().map(|&i| s.data[i].clone()).collect();
        }
        Ok(out)
    }

    /// Checks dims, channel counts and channel value ranges.
    pub fn validate(&self) -> Result<()> {
        if self.warps.len() != self.slices.len() || self.normalization.len() != self.slices.len() {
            return Err(Error::Shape("per-slice metadata length mismatch".into()));
        }
        for (k, s) in self.slices.iter().enumerate() {
            if s.data.len() != self.channels.len() {
                return Err(Error::Shape(format!("slice {k} has {} channels", s.data.len())));
            }
            for (c, img) in self.channels.iter().zip(&s.data) {
                if img.width != self.width || img.height != self.height {
                    return Err(Error::Shape(format!("slice {k} channel {} has wrong dims", c.name())));
                }
                let bad = match c {
                    Channel::FlowDirection => {
                        img.data.iter().any(|&v| !(-std::f32::consts::PI..std::f32::consts::PI).contains(&v))
                    }
                    Channel::FlowAngle => img
                        .data
                        .iter()
                        .any(|&v| !(-std::f32::consts::FRAC_PI_2..=std::f32::consts::FRAC_PI_2).contains(&v)),
                    Channel::FlowVelocity => img.data.iter().any(|&v| v < 0.0),
                    _ => false,
                };
                if bad {
                    return Err(Error::Numerical(format!("slice {k} channel {} out of range", c.name())));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            width: self.width,
            height: self.height,
            pixel_spacing_um: self.pixel_spacing_um,
            channels: self.channels.clone(),
            slices: self
                .slices
                .iter()
                .enumerate()
                .map(|(index, s)| SliceEntry { index, pose: s.pose.clone(), warning: s.warning })
                .collect(),
            warps: self.warps.clone(),
            normalization: self.normalization.clone(),
        };
        let path = dir.join("stack.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        for (k, s) in self.slices.iter().enumerate() {
            for (c, img) in self.channels.iter().zip(&s.data) {
                let p = dir.join(format!("s{k}_{}.raw", c.name()));
                let bytes: Vec<u8> = img.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("stack.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut slices = Vec::with_capacity(m.slices.len());
        for entry in &m.slices {
            let mut data = Vec::with_capacity(m.channels.len());
            for c in &m.channels {
                let p = dir.join(format!("s{}_{}.raw", entry.index, c.name()));
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                if bytes.len() != m.width * m.height * 4 {
                    return Err(Error::format(&p, "payload size does not match stack dims"));
                }
                let px = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
                data.push(Image::from_vec(m.width, m.height, px)?);
            }
            slices.push(Slice { pose: entry.pose.clone(), data, warning: entry.warning });
        }
        let stack = SliceStack {
            width: m.width,
            height: m.height,
            pixel_spacing_um: m.pixel_spacing_um,
            channels: m.channels,
            slices,
            warps: m.warps,
            normalization: m.normalization,
        };
        stack.validate()?;
        Ok(stack)
    }
}

#[derive(Serialize, Deserialize)]
struct SliceEntry {
    index: usize,
    #[serde(flatten)]
    pose: PlanePose,
    warning: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    width: usize,
    height: usize,
    pixel_spacing_um: f64,
    channels: Vec<Channel>,
    slices: Vec<SliceEntry>,
    warps: Vec<Option<BSplineTransform>>,
    normalization: Vec<Option<Normalization>>,
}

/// Plane placement and channel rendering parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceConfig {
    pub count: usize,
    pub spacing_mm: f64,
    pub axis: Axis,
    /// Distance of the first plane from the grid origin along the normal;
    /// defaults to half the plane spacing.
    pub first_offset_mm: Option<f64>,
    /// Elevational thickness of the pixel footprint; defaults to the spacing.
    pub thickness_mm: Option<f64>,
    pub psf_sigma_px: f64,
    /// Weight of the background tissue texture in grayscale; vessels get
    /// the remaining `1 - tissue_contrast`.
    pub tissue_contrast: f64,
    /// Correlation length of the tissue texture, mm.
    pub tissue_scale_mm: f64,
    /// Bernoulli keep probability of centerline samples in the track map.
    pub bubble_density: f64,
    /// `v_max = coeff · r²`, (mm/s) per mm².
    pub velocity_coeff: f64,
    pub channels: Vec<Channel>,
    pub seed: u64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            count: 8,
            spacing_mm: 0.04,
            axis: Axis::Z,
            first_offset_mm: None,
            thickness_mm: None,
            psf_sigma_px: 0.7,
            tissue_contrast: 0.25,
            tissue_scale_mm: 0.03,
            bubble_density: 0.3,
            velocity_coeff: 400.0,
            channels: Channel::ALL.to_vec(),
            seed: 0,
        }
    }
}

struct Segment {
    p0: P3,
    p1: P3,
    r0: f64,
    r1: f64,
    flat_start: bool,
    flat_end: bool,
}

impl Segment {
    fn tangent(&self) -> P3 {
        geom::normalize(geom::sub(self.p1, self.p0))
    }

    /// (distance to centerline, local radius, inside the tube)
    fn probe(&self, c: P3) -> (f64, f64, bool) {
        let d = geom::sub(self.p1, self.p0);
        let len2 = geom::dot(d, d);
        let t = if len2 > 0.0 { geom::dot(geom::sub(c, self.p0), d) / len2 } else { 0.0 };
        let tc = t.clamp(0.0, 1.0);
        let r = self.r0 + (self.r1 - self.r0) * tc;
        let dist = geom::dist(c, geom::lerp(self.p0, self.p1, tc));
        let cut = (self.flat_start && t < 0.0) || (self.flat_end && t > 1.0);
        (dist, r, !cut && dist <= r)
    }
}

/// Analytic vessel geometry with a uniform bucket grid for lookups.
struct VesselField {
    segments: Vec<Segment>,
    cell: f64,
    lo: P3,
    dims: [usize; 3],
    buckets: HashMap<[usize; 3], Vec<usize>>,
}

impl VesselField {
    fn new(graph: &VascularGraph, pad: f64) -> Self {
        let deg = graph.degrees();
        let mut segments = Vec::new();
        for e in &graph.edges {
            let last = e.polyline.len() - 2;
            for k in 0..=last {
                segments.push(Segment {
                    p0: e.polyline[k],
                    p1: e.polyline[k + 1],
                    r0: e.radii_um[k] * 1e-3,
                    r1: e.radii_um[k + 1] * 1e-3,
                    flat_start: k == 0 && deg[e.a] == 1,
                    flat_end: k == last && deg[e.b] == 1,
                });
            }
        }
        let lo = graph.meta.region_min;
        let hi = graph.meta.region_max;
        let cell = 0.05f64.max(pad);
        let dims = [0, 1, 2].map(|k| (((hi[k] - lo[k]) / cell).ceil() as usize).max(1));
        let mut buckets: HashMap<[usize; 3], Vec<usize>> = HashMap::new();
        for (si, s) in segments.iter().enumerate() {
            let reach = s.r0.max(s.r1) + pad;
            let mut a = [0usize; 3];
            let mut b = [0usize; 3];
            for k in 0..3 {
                let mn = s.p0[k].min(s.p1[k]) - reach - lo[k];
                let mx = s.p0[k].max(s.p1[k]) + reach - lo[k];
                a[k] = ((mn / cell).floor().max(0.0) as usize).min(dims[k] - 1);
                b[k] = ((mx / cell).floor().max(0.0) as usize).min(dims[k] - 1);
            }
            for z in a[2]..=b[2] {
                for y in a[1]..=b[1] {
                    for x in a[0]..=b[0] {
                        buckets.entry([x, y, z]).or_default().push(si);
                    }
                }
            }
        }
        Self { segments, cell, lo, dims, buckets }
    }

    fn candidates(&self, p: P3) -> &[usize] {
        let mut key = [0usize; 3];
        for k in 0..3 {
            let f = ((p[k] - self.lo[k]) / self.cell).floor();
            if f < 0.0 || f as usize >= self.dims[k] {
                return &[];
            }
            key[k] = f as usize;
        }
        self.buckets.get(&key).map_or(&[], |v| v.as_slice())
    }

    fn contains(&self, p: P3) -> bool {
        self.candidates(p).iter().any(|&s| self.segments[s].probe(p).2)
    }

    /// Nearest centerline segment within the padded search range:
    /// (segment index, distance, local radius).
    fn nearest(&self, p: P3) -> Option<(usize, f64, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for &s in self.candidates(p) {
            let (d, r, _) = self.segments[s].probe(p);
            if best.is_none_or(|b| d < b.1) {
                best = Some((s, d, r));
            }
        }
        best
    }
}

fn lattice_value(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x, y, z] {
        h = (h ^ v as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth 3D value noise in [0, 1] with two octaves; the same field is seen
/// by every plane so neighbouring slices share tissue structure.
fn tissue_texture(seed: u64, p: P3, scale: f64) -> f64 {
    let octave = |seed: u64, f: f64| {
        let q = [p[0] / f, p[1] / f, p[2] / f];
        let base = q.map(|v| v.floor());
        let w = [0, 1, 2].map(|k| {
            let t = q[k] - base[k];
            t * t * (3.0 - 2.0 * t)
        });
        let mut acc = 0.0;
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, corner >> 2];
            let mut weight = 1.0;
            for k in 0..3 {
                weight *= if o[k] == 1 { w[k] } else { 1.0 - w[k] };
            }
            let v = lattice_value(
                seed,
                base[0] as i64 + o[0] as i64,
                base[1] as i64 + o[1] as i64,
                base[2] as i64 + o[2] as i64,
            );
            acc += weight * v;
        }
        acc
    };
    (2.0 * octave(seed, scale) + octave(seed.wrapping_add(1), 0.5 * scale)) / 3.0
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w >= std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// In-plane direction and elevation of a unit tangent. A tangent normal to
/// the plane has no in-plane direction and reports the sentinel 0.
pub fn flow_angles(t: P3, pose: &PlanePose) -> (f64, f64) {
    let tu = geom::dot(t, pose.u);
    let tv = geom::dot(t, pose.v);
    let tn = geom::dot(t, pose.normal).clamp(-1.0, 1.0);
    let elevation = tn.asin();
    let direction = if tu.hypot(tv) > 1e-9 { wrap_angle(tv.atan2(tu)) } else { 0.0 };
    (direction, elevation)
}

fn trilinear(volume: &Mask, p: P3) -> f64 {
    let g = &volume.grid;
    let c = g.to_voxel(p);
    let base = c.map(f64::floor);
    let f = [c[0] - base[0], c[1] - base[1], c[2] - base[2]];
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                    * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                    * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                if w == 0.0 {
                    continue;
                }
                let (x, y, z) = (base[0] as i64 + dx, base[1] as i64 + dy, base[2] as i64 + dz);
                if volume.is_set(x, y, z) {
                    acc += w;
                }
            }
        }
    }
    acc
}

/// Samples `graph` (and its rasterization `volume`) along parallel planes.
pub fn slice_stack(graph: &VascularGraph, volume: &Mask, cfg: &SliceConfig) -> Result<SliceStack> {
    if cfg.count == 0 || !(cfg.spacing_mm > 0.0) {
        return Err(Error::Parameter("slice count and spacing must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.tissue_contrast) || !(cfg.tissue_scale_mm > 0.0) {
        return Err(Error::Parameter("tissue_contrast must lie in [0, 1] and tissue_scale_mm be positive".into()));
    }
    let grid: &Grid = &volume.grid;
    let axis = cfg.axis.index();
    let (ua, va) = cfg.axis.in_plane();
    if (grid.spacing[ua] - grid.spacing[va]).abs() > 1e-12 {
        return Err(Error::Parameter("in-plane voxel spacing must be isotropic".into()));
    }
    let px = grid.spacing[ua];
    let (width, height) = (grid.dims[ua], grid.dims[va]);
    let thickness = cfg.thickness_mm.unwrap_or(cfg.spacing_mm);
    let first = cfg.first_offset_mm.unwrap_or(0.5 * cfg.spacing_mm);
    let extent = grid.dims[axis] as f64 * grid.spacing[axis];
    let mut channels = cfg.channels.clone();
    channels.sort();
    channels.dedup();

    let unit = |k: usize| {
        let mut e = [0.0; 3];
        e[k] = 1.0;
        e
    };
    let field = VesselField::new(graph, px + thickness);

    let mut slices = Vec::with_capacity(cfg.count);
    for k in 0..cfg.count {
        let offset = first + k as f64 * cfg.spacing_mm;
        let mut origin = grid.origin;
        origin[axis] += offset;
        let pose = PlanePose { origin, normal: unit(axis), u: unit(ua), v: unit(va) };
        if !(0.0..=extent).contains(&offset) {
            log::warn!("plane {k} at offset {offset} mm misses the volume");
            slices.push(Slice { pose, data: vec![Image::new(width, height); channels.len()], warning: true });
            continue;
        }
        let mut rng = rng::rng(cfg.seed ^ k as u64);
        let center = |i: f64, j: f64| {
            geom::add(origin, geom::add(geom::scale(pose.u, (i + 0.5) * px), geom::scale(pose.v, (j + 0.5) * px)))
        };

        let mut gray = Image::<f32>::new(width, height);
        let mut density = Image::<f32>::new(width, height);
        let mut direction = Image::<f32>::new(width, height);
        let mut elevation = Image::<f32>::new(width, height);
        let mut velocity = Image::<f32>::new(width, height);
        let mut track = Image::<f32>::new(width, height);
        const SUB: [f64; 3] = [-1.0 / 3.0, 0.0, 1.0 / 3.0];
        for j in 0..height {
            for i in 0..width {
                let c = center(i as f64, j as f64);
                let mut g = trilinear(volume, c);
                if cfg.tissue_contrast > 0.0 {
                    let t = tissue_texture(cfg.seed, c, cfg.tissue_scale_mm);
                    g = (1.0 - cfg.tissue_contrast) * g + cfg.tissue_contrast * t;
                }
                gray.set(i, j, g as f32);
                let mut hits = 0;
                for &dn in &SUB {
                    for &dv in &SUB {
                        for &du in &SUB {
                            let p = geom::add(
                                c,
                                geom::add(
                                    geom::scale(pose.normal, dn * thickness),
                                    geom::add(geom::scale(pose.u, du * px), geom::scale(pose.v, dv * px)),
                                ),
                            );
                            if field.contains(p) {
                                hits += 1;
                            }
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                density.set(i, j, hits as f32 / 27.0);
                if let Some((s, d, r)) = field.nearest(c) {
                    let (dir, elev) = flow_angles(field.segments[s].tangent(), &pose);
                    direction.set(i, j, dir as f32);
                    elevation.set(i, j, elev as f32);
                    if d <= r {
                        let vmax = cfg.velocity_coeff * r * r;
                        velocity.set(i, j, (vmax * (1.0 - (d / r).powi(2))).max(0.0) as f32);
                    }
                }
            }
        }
        if cfg.psf_sigma_px > 0.0 {
            gray = gaussian_blur(&gray, cfg.psf_sigma_px);
        }
        // microbubble tracks: centerline samples inside the slab
        let step = 0.5 * px;
        for seg in &field.segments {
            let len = geom::dist(seg.p0, seg.p1);
            let n = (len / step).ceil().max(1.0) as usize;
            for q in 0..=n {
                let p = geom::lerp(seg.p0, seg.p1, q as f64 / n as f64);
                let rel = geom::sub(p, origin);
                if geom::dot(rel, pose.normal).abs() > 0.5 * thickness {
                    continue;
                }
                if rng.random_range(0.0..1.0) >= cfg.bubble_density {
                    continue;
                }
                let iu = (geom::dot(rel, pose.u) / px).floor();
                let iv = (geom::dot(rel, pose.v) / px).floor();
                if iu >= 0.0 && iv >= 0.0 && (iu as usize) < width && (iv as usize) < height {
                    track.set(iu as usize, iv as usize, 1.0);
                }
            }
        }
        let data = channels
            .iter()
            .map(|c| match c {
                Channel::Grayscale => gray.clone(),
                Channel::FlowDensity => density.clone(),
                Channel::FlowDirection => direction.clone(),
                Channel::FlowAngle => elevation.clone(),
                Channel::FlowVelocity => velocity.clone(),
                Channel::MicrobubbleTrack => track.clone(),
            })
            .collect();
        slices.push(Slice { pose, data, warning: false });
    }
    let n = slices.len();
    Ok(SliceStack {
        width,
        height,
        pixel_spacing_um: px * 1e3,
        channels,
        slices,
        warps: vec![None; n],
        normalization: vec![None; n],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    /// Additive Gaussian noise on grayscale.
    pub noise_sigma: f64,
    /// Fraction of grayscale pixels replaced by salt (1) or pepper (0).
    pub impulse_fraction: f64,
    /// Extra Gaussian blur on grayscale, px.
    pub blur_sigma_px: f64,
    /// Bound on the per-slice B-spline jitter displacement, px.
    pub jitter_px: f64,
    pub jitter_spacing_px: f64,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            impulse_fraction: 0.02,
            blur_sigma_px: 0.0,
            jitter_px: 1.0,
            jitter_spacing_px: 16.0,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 || self.blur_sigma_px < 0.0 || self.jitter_px < 0.0 {
            return Err(Error::Config("degradation magnitudes must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.impulse_fraction) {
            return Err(Error::Config("impulse_fraction must lie in [0, 1]".into()));
        }
        if self.jitter_px > 0.0 && !(self.jitter_spacing_px > 0.0) {
            return Err(Error::Config("jitter_spacing_px must be positive".into()));
        }
        Ok(())
    }
}

/// Degrades every slice independently: random B-spline jitter on all
/// channels, then blur, Gaussian noise and impulses on grayscale.
pub fn corrupt(stack: &SliceStack, cfg: &DegradationConfig) -> Result<SliceStack> {
    cfg.validate()?;
    let mut out = stack.clone();
    let gray_idx = stack.channel_index(Channel::Grayscale);
    let normal =
        Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Parameter(e.to_string()))?;
    for (k, slice) in out.slices.iter_mut().enumerate() {
        let mut rng = rng::rng(cfg.seed ^ k as u64);
        if cfg.jitter_px > 0.0 {
            let warp =
                BSplineTransform::random(stack.width, stack.height, cfg.jitter_spacing_px, cfg.jitter_px, &mut rng)?;
            for (c, img) in stack.channels.iter().zip(slice.data.iter_mut()) {
                *img = if c.is_discrete() { apply_transform_nearest(img, &warp) } else { apply_transform(img, &warp) };
            }
            out.warps[k] = Some(warp);
        }
        let Some(g) = gray_idx else { continue };
        let img = &mut slice.data[g];
        if cfg.blur_sigma_px > 0.0 {
            *img = gaussian_blur(img, cfg.blur_sigma_px);
        }
        if cfg.noise_sigma > 0.0 {
            for v in img.data.iter_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        if cfg.impulse_fraction > 0.0 {
            for v in img.data.iter_mut() {
                if rng.random_range(0.0..1.0) < cfg.impulse_fraction {
                    *v = if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { 0.0 };
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphMeta;
    use crate::phantom::rasterize;

    fn tube_graph(a: P3, b: P3, r_um: f64) -> VascularGraph {
        let mut g = VascularGraph::new(GraphMeta { region_min: [0.0; 3], region_max: [0.32, 0.32, 0.32], seed: 0 });
        let na = g.add_node(a);
        let nb = g.add_node(b);
        g.add_straight_edge(na, nb, r_um);
        g
    }

    fn setup(a: P3, b: P3) -> (VascularGraph, Mask) {
        let g = tube_graph(a, b, 40.0);
        let grid = Grid::isotropic([32, 32, 32], 0.01).unwrap();
        let m = rasterize(&g, &grid);
        (g, m)
    }

    #[test]
    fn perpendicular_tube_has_vertical_elevation() {
        let (g, m) = setup([0.155, 0.155, 0.02], [0.155, 0.155, 0.30]);
        let cfg = SliceConfig { count: 1, spacing_mm: 0.16, ..Default::default() };
        let s = slice_stack(&g, &m, &cfg).unwrap();
        let ang = s.channel(0, Channel::FlowAngle).unwrap();
        let dir = s.channel(0, Channel::FlowDirection).unwrap();
        assert!((ang.get(15, 15) as f64 - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
        assert_eq!(dir.get(15, 15), 0.0);
    }

    #[test]
    fn in_plane_tube_along_x() {
        let (g, m) = setup([0.02, 0.155, 0.16], [0.30, 0.155, 0.16]);
        let cfg = SliceConfig { count: 1, spacing_mm: 0.32, first_offset_mm: Some(0.16), ..Default::default() };
        let s = slice_stack(&g, &m, &cfg).unwrap();
        let d = s.channel(0, Channel::FlowDensity).unwrap();
        let ang = s.channel(0, Channel::FlowAngle).unwrap();
        let dir = s.channel(0, Channel::FlowDirection).unwrap();
        let mut fg = 0;
        for i in 0..d.len() {
            if d.data[i] > 0.0 {
                fg += 1;
                assert_eq!(ang.data[i], 0.0);
                assert_eq!(dir.data[i], 0.0);
            } else {
                assert_eq!(ang.data[i], 0.0);
                assert_eq!(dir.data[i], 0.0);
            }
        }
        assert!(fg > 100);
    }

    #[test]
    fn poiseuille_profile_ratio() {
        let r: f64 = 0.04;
        let vmax = 400.0 * r * r;
        let at = |d: f64| vmax * (1.0 - (d / r).powi(2));
        assert!((at(r / 2.0) / at(0.0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn missing_plane_is_flagged_empty() {
        let (g, m) = setup([0.02, 0.155, 0.16], [0.30, 0.155, 0.16]);
        let cfg = SliceConfig { count: 2, spacing_mm: 0.5, first_offset_mm: Some(0.1), ..Default::default() };
        let s = slice_stack(&g, &m, &cfg).unwrap();
        assert!(!s.slices[0].warning);
        assert!(s.slices[1].warning);
        assert!(s.slices[1].data.iter().all(|img| img.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(std::f64::consts::PI), -std::f64::consts::PI);
        assert!((wrap_angle(3.0 * std::f64::consts::PI / 2.0) + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
