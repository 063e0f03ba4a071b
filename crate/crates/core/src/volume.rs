//! Regular 3D voxel grids with physical spacing.
//!
//! Data is stored z-major (x varies fastest). On disk a volume is a JSON
//! header plus a raw little-endian payload; the header lists `dims`,
//! `spacing_mm` and `origin_mm` in z, y, x order to match the payload order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::P3;

/// Grid geometry. `dims`, `spacing` and `origin` are indexed x, y, z.
/// Voxel `(x, y, z)` has its centre at `origin + (idx + 0.5) * spacing`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Parameter(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!("grid spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Isotropic grid anchored at the origin.
    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Result<Self> {
        Self::new(dims, [spacing; 3], [0.0; 3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let y = (i / self.dims[0]) % self.dims[1];
        let z = i / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn center(&self, x: usize, y: usize, z: usize) -> P3 {
        [
            self.origin[0] + (x as f64 + 0.5) * self.spacing[0],
            self.origin[1] + (y as f64 + 0.5) * self.spacing[1],
            self.origin[2] + (z as f64 + 0.5) * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinate of a physical point (voxel centres at integers).
    #[inline]
    pub fn to_voxel(&self, p: P3) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0] - 0.5,
            (p[1] - self.origin[1]) / self.spacing[1] - 0.5,
            (p[2] - self.origin[2]) / self.spacing[2] - 0.5,
        ]
    }

    /// Far corner of the grid extent.
    pub fn extent_max(&self) -> P3 {
        [
            self.origin[0] + self.dims[0] as f64 * self.spacing[0],
            self.origin[1] + self.dims[1] as f64 * self.spacing[1],
            self.origin[2] + self.dims[2] as f64 * self.spacing[2],
        ]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    pub fn physical_volume(&self) -> f64 {
        self.voxel_volume() * self.len() as f64
    }

    #[inline]
    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.dims[0]
            && (y as usize) < self.dims[1]
            && (z as usize) < self.dims[2]
    }
}

/// Element types that have an on-disk representation.
pub trait VoxelType: Copy + Default + PartialEq + std::fmt::Debug + 'static {
    const DTYPE: &'static str;
    fn write_le(&self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const SIZE: usize;
}

impl VoxelType for u8 {
    const DTYPE: &'static str = "u8";
    const SIZE: usize = 1;
    fn write_le(&self, out: &mut Vec<u8>) {
        out.push(*self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

impl VoxelType for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;
    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub grid: Grid,
    pub data: Vec<T>,
}

/// Binary occupancy mask (0 / 1).
pub type Mask = Volume<u8>;

impl<T: Copy + Default> Volume<T> {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self { grid, data: vec![T::default(); n] }
    }

    pub fn from_data(grid: Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!("payload has {} voxels, grid expects {}", data.len(), grid.len())));
        }
        Ok(Self { grid, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.grid.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.grid.index(x, y, z);
        self.data[i] = v;
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume { grid: self.grid.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    #[inline]
    pub fn is_set(&self, x: i64, y: i64, z: i64) -> bool {
        self.grid.contains(x, y, z) && self.get(x as usize, y as usize, z as usize) != 0
    }

    /// Foreground volume in mm³.
    pub fn foreground_volume(&self) -> f64 {
        self.count() as f64 * self.grid.voxel_volume()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: String,
    order: String,
    payload: String,
}

const ORDER: &str = "zyx-row-major";

/// Path of the raw payload that accompanies a header.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

impl<T: VoxelType> Volume<T> {
    /// Writes `<stem>.json` (header) and `<stem>.raw` (payload).
    pub fn save(&self, header_path: &Path) -> Result<()> {
        let raw = payload_path(header_path);
        let g = &self.grid;
        let header = Header {
            dims: [g.dims[2], g.dims[1], g.dims[0]],
            spacing_mm: [g.spacing[2], g.spacing[1], g.spacing[0]],
            origin_mm: [g.origin[2], g.origin[1], g.origin[0]],
            dtype: T::DTYPE.to_string(),
            order: ORDER.to_string(),
            payload: raw.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        let text = serde_json::to_string_pretty(&header)?;
        fs::write(header_path, text).map_err(|e| Error::io(header_path, e))?;
        let mut bytes = Vec::with_capacity(self.data.len() * T::SIZE);
        for v in &self.data {
            v.write_le(&mut bytes);
        }
        fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
    }

    pub fn load(header_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
        let header: Header = serde_json::from_str(&text).map_err(|e| Error::format(header_path, e.to_string()))?;
        if header.dtype != T::DTYPE {
            return Err(Error::format(header_path, format!("dtype {} but {} requested", header.dtype, T::DTYPE)));
        }
        if header.order != ORDER {
            return Err(Error::format(header_path, format!("unsupported order {}", header.order)));
        }
        let grid = Grid::new(
            [header.dims[2], header.dims[1], header.dims[0]],
            [header.spacing_mm[2], header.spacing_mm[1], header.spacing_mm[0]],
            [header.origin_mm[2], header.origin_mm[1], header.origin_mm[0]],
        )?;
        let raw = header_path.with_file_name(&header.payload);
        let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        if bytes.len() != grid.len() * T::SIZE {
            return Err(Error::format(&raw, format!("expected {} bytes, found {}", grid.len() * T::SIZE, bytes.len())));
        }
        let data = bytes.chunks_exact(T::SIZE).map(T::read_le).collect();
        Ok(Self { grid, data })
    }
}
