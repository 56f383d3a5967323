//! Point cloud ingestion and voxelization.
//!
//! A [`RawPointCloud`] holds real-valued coordinates in source units. [`quantize`]
//! maps it onto the integer grid `[0, 2^depth)^3` with a single uniform scale so
//! that voxel space stays cubic, and [`dequantize`] maps voxels back.

mod ply;
mod synth;

pub use ply::{read_ply, read_ply_bytes, write_ply, write_ply_bytes, PlyFormat};
pub use synth::{synth, synth_with, SynthKind, SynthOptions};

use crate::error::{Error, Result};

/// Largest supported octree depth (bits per axis).
pub const MAX_DEPTH: u8 = 21;

pub type Point3 = [f64; 3];
pub type Voxel = [u32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct RawPointCloud {
    pub points: Vec<Point3>,
    pub source_id: String,
}

impl RawPointCloud {
    pub fn new(points: Vec<Point3>, source_id: impl Into<String>) -> Result<Self> {
        let pc = RawPointCloud {
            points,
            source_id: source_id.into(),
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("point cloud is empty"));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::invalid(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Deduplicated integer voxels at a fixed bit depth plus the affine map back to
/// source coordinates: `source ≈ origin + scale * voxel`.
///
/// Voxels are kept sorted, so two clouds holding the same voxel set compare equal.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPointCloud {
    depth: u8,
    voxels: Vec<Voxel>,
    pub origin: Point3,
    pub scale: f64,
}

impl QuantizedPointCloud {
    /// Builds a cloud from arbitrary voxels; duplicates collapse and order is
    /// normalized.
    pub fn new(depth: u8, mut voxels: Vec<Voxel>, origin: Point3, scale: f64) -> Result<Self> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::invalid(format!(
                "depth {depth} outside [1, {MAX_DEPTH}]"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!(
                "scale {scale} must be positive and finite"
            )));
        }
        if origin.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("origin has a non-finite coordinate"));
        }
        let side = 1u32 << depth;
        if let Some(v) = voxels.iter().find(|v| v.iter().any(|&c| c >= side)) {
            return Err(Error::invalid(format!("voxel {v:?} outside [0, {side})")));
        }
        voxels.sort_unstable();
        voxels.dedup();
        Ok(QuantizedPointCloud {
            depth,
            voxels,
            origin,
            scale,
        })
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn side(&self) -> u32 {
        1u32 << self.depth
    }
}

pub fn quantize(pc: &RawPointCloud, depth: u8) -> Result<QuantizedPointCloud> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::invalid(format!(
            "depth {depth} outside [1, {MAX_DEPTH}]"
        )));
    }
    pc.validate()?;

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pc.points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
    let max_coord = ((1u64 << depth) - 1) as f64;
    // all points coincide: any positive scale works, every voxel is the origin
    let scale = if extent > 0.0 {
        extent / max_coord
    } else {
        1.0
    };

    let voxels = pc
        .points
        .iter()
        .map(|p| {
            let mut v = [0u32; 3];
            for a in 0..3 {
                if hi[a] > lo[a] {
                    // f64::round is half-away-from-zero
                    let c = ((p[a] - lo[a]) / scale).round();
                    v[a] = c.clamp(0.0, max_coord) as u32;
                }
            }
            v
        })
        .collect();
    QuantizedPointCloud::new(depth, voxels, lo, scale)
}

pub fn dequantize(qpc: &QuantizedPointCloud) -> RawPointCloud {
    let points = qpc
        .voxels
        .iter()
        .map(|v| {
            [
                qpc.origin[0] + qpc.scale * v[0] as f64,
                qpc.origin[1] + qpc.scale * v[1] as f64,
                qpc.origin[2] + qpc.scale * v[2] as f64,
            ]
        })
        .collect();
    RawPointCloud {
        points,
        source_id: "dequantized".to_string(),
    }
}
