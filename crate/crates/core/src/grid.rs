//! Voxel-grid geometry, label storage and feature volumes.
//!
//! Feature volumes are stored row-major in `(c, x, y, z)` order; the flat
//! voxel index of `(i, j, k)` is `(i·ny + j)·nz + k`.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Number of semantic classes (labels `1..=NUM_CLASSES`).
pub const NUM_CLASSES: usize = 16;
/// Label for free space.
pub const EMPTY: u8 = 0;
/// Label excluded from losses and metrics.
pub const IGNORE: u8 = 255;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

/// Label of the drivable-surface class used for the ground plane.
pub const DRIVEABLE_SURFACE: u8 = 11;

const SNAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub voxel: f64,
    pub dims: [usize; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex(pub [usize; 3]);

impl GridSpec {
    /// Build from extents; each extent must be an integer multiple of `voxel`.
    pub fn new(min: [f64; 3], max: [f64; 3], voxel: f64) -> Result<Self> {
        if !(voxel > 0.0) {
            return Err(Error::contract(format!(
                "voxel size must be positive, got {voxel}"
            )));
        }
        let mut dims = [0; 3];
        for a in 0..3 {
            let cells = (max[a] - min[a]) / voxel;
            let n = cells.round();
            if n < 1.0 || (cells - n).abs() * voxel > SNAP {
                return Err(Error::contract(format!(
                    "axis {a}: extent [{}, {}] is not a positive multiple of voxel {voxel}",
                    min[a], max[a]
                )));
            }
            dims[a] = n as usize;
        }
        Ok(GridSpec {
            min,
            max,
            voxel,
            dims,
        })
    }

    /// 80 m × 80 m × 6.4 m at 0.4 m: the full-scale occupancy block.
    pub fn paper() -> Self {
        Self::new([-40.0, -40.0, -1.0], [40.0, 40.0, 5.4], 0.4).expect("valid preset")
    }

    /// 16 m × 16 m × 3.2 m at 0.4 m.
    pub fn desk() -> Self {
        Self::new([-8.0, -8.0, -1.0], [8.0, 8.0, 2.2], 0.4).expect("valid preset")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn flat(&self, idx: VoxelIndex) -> usize {
        let [i, j, k] = idx.0;
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn unflat(&self, flat: usize) -> VoxelIndex {
        let k = flat % self.dims[2];
        let j = (flat / self.dims[2]) % self.dims[1];
        let i = flat / (self.dims[1] * self.dims[2]);
        VoxelIndex([i, j, k])
    }

    /// Containing voxel of a point; the upper boundary of each axis is outside.
    pub fn world_to_index(&self, p: [f64; 3]) -> Option<VoxelIndex> {
        let mut idx = [0; 3];
        for a in 0..3 {
            let t = ((p[a] - self.min[a]) / self.voxel).floor();
            if !(t >= 0.0) || t >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = t as usize;
        }
        Some(VoxelIndex(idx))
    }

    pub fn world_to_flat(&self, p: [f64; 3]) -> Option<usize> {
        self.world_to_index(p).map(|i| self.flat(i))
    }

    pub fn index_to_center(&self, idx: VoxelIndex) -> Result<[f64; 3]> {
        let mut c = [0.0; 3];
        for a in 0..3 {
            if idx.0[a] >= self.dims[a] {
                return Err(Error::contract(format!(
                    "voxel index {:?} out of range for dims {:?}",
                    idx.0, self.dims
                )));
            }
            c[a] = self.min[a] + (idx.0[a] as f64 + 0.5) * self.voxel;
        }
        Ok(c)
    }

    /// Half-open index range `[lo, hi)` of voxels whose centers satisfy
    /// `lo_m ≤ center < hi_m` on `axis`, clipped to the grid.
    pub fn center_range(&self, axis: usize, lo_m: f64, hi_m: f64) -> (usize, usize) {
        let to_idx = |m: f64| {
            let t = (m - self.min[axis]) / self.voxel - 0.5 - SNAP;
            t.ceil().clamp(0.0, self.dims[axis] as f64) as usize
        };
        let (lo, hi) = (to_idx(lo_m), to_idx(hi_m));
        (lo, hi.max(lo))
    }
}

/// One byte per voxel: 0 empty, 1..=16 class, 255 ignore.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    spec: GridSpec,
    labels: Vec<u8>,
}

impl LabelGrid {
    pub fn empty(spec: GridSpec) -> Self {
        LabelGrid {
            spec,
            labels: vec![EMPTY; spec.num_voxels()],
        }
    }

    pub fn from_labels(spec: GridSpec, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != spec.num_voxels() {
            return Err(Error::contract(format!(
                "label count {} does not match grid {:?}",
                labels.len(),
                spec.dims
            )));
        }
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l as usize > NUM_CLASSES && l != IGNORE)
        {
            return Err(Error::contract(format!("invalid label {bad}")));
        }
        Ok(LabelGrid { spec, labels })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, idx: VoxelIndex) -> u8 {
        self.labels[self.spec.flat(idx)]
    }

    pub fn set(&mut self, idx: VoxelIndex, label: u8) {
        debug_assert!(label as usize <= NUM_CLASSES || label == IGNORE);
        let f = self.spec.flat(idx);
        self.labels[f] = label;
    }

    pub fn is_occupied(&self, flat: usize) -> bool {
        let l = self.labels[flat];
        l != EMPTY && l != IGNORE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureRole {
    Camera,
    Lidar,
    Fused,
}

/// Dense `[C, nx, ny, nz]` feature volume.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFeatures {
    pub role: FeatureRole,
    pub volume: Tensor,
}

impl VoxelFeatures {
    pub fn new(role: FeatureRole, volume: Tensor) -> Result<Self> {
        if volume.shape().len() != 4 {
            return Err(Error::contract(format!(
                "feature volume must be [C, nx, ny, nz], got {:?}",
                volume.shape()
            )));
        }
        Ok(VoxelFeatures { role, volume })
    }

    pub fn zeros(role: FeatureRole, channels: usize, spec: &GridSpec) -> Self {
        let [nx, ny, nz] = spec.dims;
        VoxelFeatures {
            role,
            volume: Tensor::zeros(&[channels, nx, ny, nz]),
        }
    }

    pub fn channels(&self) -> usize {
        self.volume.shape()[0]
    }
}
