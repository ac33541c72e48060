//! Point cloud I/O, voxelization, color conversion and training-block resampling.

mod color;
mod ply;
mod resample;

pub use color::{rgb_to_yuv, yuv_to_rgb, yuv_to_rgb8, COLOR_MATRIX_ID};
pub use ply::{parse_ply, write_ply, PlyFormat};
pub use resample::{
    farthest_point_sample, knn_cluster, knn_indices, resample, write_blocks, Block, BlockIndexEntry,
    ResampleConfig,
};

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PcioError {
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("PLY vertex element lacks property '{0}'")]
    MissingProperty(&'static str),
    #[error("PLY body is truncated")]
    Truncated,
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("bit depth {0} outside [4,16]")]
    InvalidBitDepth(u32),
    #[error("requested {requested} points but the cloud has {available}")]
    TooMany { requested: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Cloud as read from disk: real positions and 8-bit RGB colors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawPointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl RawPointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Voxelized cloud with normalized YUV attributes.
///
/// Coordinates are unique, lie in `[0, 2^bit_depth)` and are kept in
/// lexicographic order by every constructor in this module.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[i32; 3]>,
    pub attrs: Vec<[f64; 3]>,
    pub bit_depth: u32,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> PointCloud {
        PointCloud {
            coords: rows.iter().map(|&r| self.coords[r]).collect(),
            attrs: rows.iter().map(|&r| self.attrs[r]).collect(),
            bit_depth: self.bit_depth,
        }
    }

    /// Integer positions with 8-bit RGB, ready for `write_ply`.
    pub fn to_raw(&self) -> RawPointCloud {
        RawPointCloud {
            positions: self
                .coords
                .iter()
                .map(|c| c.map(|v| v as f64))
                .collect(),
            colors: self.attrs.iter().map(|&a| yuv_to_rgb8(a)).collect(),
        }
    }
}

/// Map from real positions to the voxel grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelTransform {
    pub origin: [f64; 3],
    pub scale: f64,
}

impl VoxelTransform {
    /// Min-shift, then scale the largest extent onto `[0, 2^bit_depth - 1]`.
    ///
    /// Clouds whose positions are already integers spanning fewer than
    /// `2^bit_depth` cells keep unit scale, so voxelizing a voxelized cloud
    /// only removes the min-shift.
    pub fn fit(raw: &RawPointCloud, bit_depth: u32) -> Result<Self, PcioError> {
        if !(4..=16).contains(&bit_depth) {
            return Err(PcioError::InvalidBitDepth(bit_depth));
        }
        if raw.is_empty() {
            return Err(PcioError::EmptyCloud);
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &raw.positions {
            for k in 0..3 {
                if !p[k].is_finite() {
                    return Err(PcioError::InvalidValue(format!("non-finite position {p:?}")));
                }
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let max_cell = ((1u32 << bit_depth) - 1) as f64;
        let integral = raw.positions.iter().flatten().all(|v| v.fract() == 0.0);
        let scale = if extent == 0.0 || (integral && extent <= max_cell) {
            1.0
        } else {
            max_cell / extent
        };
        Ok(Self { origin: lo, scale })
    }

    pub fn apply(&self, p: [f64; 3], bit_depth: u32) -> [i32; 3] {
        let max_cell = ((1u32 << bit_depth) - 1) as f64;
        [0, 1, 2].map(|k| ((p[k] - self.origin[k]) * self.scale).round().clamp(0.0, max_cell) as i32)
    }
}

/// Quantize positions to the voxel grid, merging duplicate voxels by the
/// mean of their RGB colors before converting to normalized YUV.
pub fn voxelize(raw: &RawPointCloud, bit_depth: u32) -> Result<PointCloud, PcioError> {
    let tf = VoxelTransform::fit(raw, bit_depth)?;
    voxelize_with(raw, bit_depth, &tf)
}

pub fn voxelize_with(
    raw: &RawPointCloud,
    bit_depth: u32,
    tf: &VoxelTransform,
) -> Result<PointCloud, PcioError> {
    if !(4..=16).contains(&bit_depth) {
        return Err(PcioError::InvalidBitDepth(bit_depth));
    }
    if raw.is_empty() {
        return Err(PcioError::EmptyCloud);
    }
    let mut buckets: HashMap<[i32; 3], ([f64; 3], u32)> = HashMap::with_capacity(raw.len());
    for (p, c) in raw.positions.iter().zip(&raw.colors) {
        let v = tf.apply(*p, bit_depth);
        let e = buckets.entry(v).or_insert(([0.0; 3], 0));
        for k in 0..3 {
            e.0[k] += c[k] as f64;
        }
        e.1 += 1;
    }
    let mut voxels: Vec<([i32; 3], [f64; 3])> = buckets
        .into_iter()
        .map(|(v, (sum, n))| (v, sum.map(|s| s / n as f64)))
        .collect();
    voxels.sort_unstable_by_key(|(v, _)| *v);
    Ok(PointCloud {
        coords: voxels.iter().map(|(v, _)| *v).collect(),
        attrs: voxels.iter().map(|(_, rgb)| rgb_to_yuv(*rgb)).collect(),
        bit_depth,
    })
}
