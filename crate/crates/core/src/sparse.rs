//! Sparse voxel tensors and generalized sparse convolution.
//!
//! A convolution only visits occupied voxels: for every output coordinate `u`
//! and kernel offset `i`, the input at `u + i * stride` contributes iff it is
//! occupied. Outputs of a stride-preserving convolution sit exactly on the
//! input coordinates; a stride-doubling convolution outputs the floor-to-even
//! coordinates of its input.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{gemm_into, Mat, Real};

pub type Coord = [i32; 3];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SparseError {
    #[error("duplicate coordinate {0:?}")]
    DuplicateCoord(Coord),
    #[error("coordinate {coord:?} is not a multiple of stride {stride}")]
    Misaligned { coord: Coord, stride: i32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stride mismatch: {0}")]
    Stride(String),
    #[error("empty tensor")]
    Empty,
}

/// Multiplicative hasher for packed coordinates.
#[derive(Default, Clone, Copy)]
pub struct CoordHasher(u64);

impl Hasher for CoordHasher {
    #[inline]
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u64(b as u64);
        }
    }

    #[inline]
    fn write_u64(&mut self, v: u64) {
        let x = (self.0 ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        self.0 = x ^ (x >> 29);
    }
}

type FastMap<K, V> = HashMap<K, V, BuildHasherDefault<CoordHasher>>;

#[inline]
fn pack(c: Coord) -> u64 {
    const BIAS: i64 = 1 << 20;
    let f = |v: i32| ((v as i64 + BIAS) as u64) & 0x1F_FFFF;
    (f(c[0]) << 42) | (f(c[1]) << 21) | f(c[2])
}

/// Exact coordinate -> row lookup.
#[derive(Clone, Debug, Default)]
pub struct CoordIndex {
    map: FastMap<u64, u32>,
}

impl CoordIndex {
    #[inline]
    pub fn get(&self, c: Coord) -> Option<usize> {
        self.map.get(&pack(c)).map(|&r| r as usize)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn build_coord_index(coords: &[Coord]) -> Result<CoordIndex, SparseError> {
    let mut map = FastMap::with_capacity_and_hasher(coords.len(), Default::default());
    for (row, &c) in coords.iter().enumerate() {
        if map.insert(pack(c), row as u32).is_some() {
            return Err(SparseError::DuplicateCoord(c));
        }
    }
    Ok(CoordIndex { map })
}

/// Ordered, unique voxel coordinates at one stride.
#[derive(Clone, Debug)]
pub struct CoordSet {
    coords: Vec<Coord>,
    stride: i32,
    index: CoordIndex,
}

impl CoordSet {
    pub fn new(coords: Vec<Coord>, stride: i32) -> Result<Self, SparseError> {
        if stride < 1 || (stride & (stride - 1)) != 0 {
            return Err(SparseError::Stride(format!("stride {stride} is not a power of two")));
        }
        if let Some(&c) = coords.iter().find(|c| c.iter().any(|v| v.rem_euclid(stride) != 0)) {
            return Err(SparseError::Misaligned { coord: c, stride });
        }
        let index = build_coord_index(&coords)?;
        Ok(Self {
            coords,
            stride,
            index,
        })
    }

    #[inline]
    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    #[inline]
    pub fn stride(&self) -> i32 {
        self.stride
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn row_of(&self, c: Coord) -> Option<usize> {
        self.index.get(c)
    }

    /// Unique `2 * stride * floor(u / (2 * stride))` coordinates, lexicographically sorted.
    pub fn downsample(&self) -> CoordSet {
        let s = self.stride * 2;
        let mut out: Vec<Coord> = self
            .coords
            .iter()
            .map(|c| c.map(|v| v.div_euclid(s) * s))
            .collect();
        out.sort_unstable();
        out.dedup();
        CoordSet::new(out, s).expect("downsampled coordinates are unique and aligned")
    }

    /// Same coordinates with rows reordered: new row `r` is old row `perm[r]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<CoordSet, SparseError> {
        if perm.len() != self.len() {
            return Err(SparseError::Shape("permutation length".into()));
        }
        CoordSet::new(perm.iter().map(|&p| self.coords[p]).collect(), self.stride)
    }
}

/// Kernel offsets in lexicographic order over `{-(K-1)/2 ..= (K-1)/2}^3`.
pub fn kernel_offsets(kernel: usize) -> Vec<Coord> {
    assert!(kernel % 2 == 1, "kernel size must be odd");
    let r = (kernel / 2) as i32;
    let mut out = Vec::with_capacity(kernel.pow(3));
    for x in -r..=r {
        for y in -r..=r {
            for z in -r..=r {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Gather/scatter row pairs for one kernel offset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OffsetPairs {
    pub input_rows: Vec<u32>,
    pub output_rows: Vec<u32>,
}

impl OffsetPairs {
    pub fn len(&self) -> usize {
        self.input_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_rows.is_empty()
    }

    fn is_identity(&self, rows: usize) -> bool {
        self.len() == rows
            && self
                .input_rows
                .iter()
                .zip(&self.output_rows)
                .enumerate()
                .all(|(r, (&i, &o))| i as usize == r && o as usize == r)
    }
}

/// Per-offset (input_row, output_row) pairs, pairs ordered by output row.
#[derive(Clone, Debug)]
pub struct KernelMap {
    pub kernel: usize,
    pub offsets: Vec<Coord>,
    pub pairs: Vec<OffsetPairs>,
    pub input_len: usize,
    pub output_len: usize,
}

impl KernelMap {
    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(OffsetPairs::len).sum()
    }
}

/// Pairs `(row(u + i * input.stride), row(u))` for every output `u` and offset `i`.
pub fn build_kernel_map(input: &CoordSet, output: &CoordSet, kernel: usize) -> KernelMap {
    let offsets = kernel_offsets(kernel);
    let s = input.stride();
    let pairs = offsets
        .iter()
        .map(|off| {
            let mut p = OffsetPairs::default();
            for (o, u) in output.coords().iter().enumerate() {
                let q = [u[0] + off[0] * s, u[1] + off[1] * s, u[2] + off[2] * s];
                if let Some(i) = input.row_of(q) {
                    p.input_rows.push(i as u32);
                    p.output_rows.push(o as u32);
                }
            }
            p
        })
        .collect();
    KernelMap {
        kernel,
        offsets,
        pairs,
        input_len: input.len(),
        output_len: output.len(),
    }
}

/// Map for the transpose of a stride-doubling convolution: target `t` at the
/// finer stride receives from coarse input `t - i * target.stride`.
pub fn build_transpose_kernel_map(
    input: &CoordSet,
    target: &CoordSet,
    kernel: usize,
) -> Result<KernelMap, SparseError> {
    if target.stride() * 2 != input.stride() {
        return Err(SparseError::Stride(format!(
            "transpose from stride {} to {}",
            input.stride(),
            target.stride()
        )));
    }
    let offsets = kernel_offsets(kernel);
    let s = target.stride();
    let pairs = offsets
        .iter()
        .map(|off| {
            let mut p = OffsetPairs::default();
            for (o, t) in target.coords().iter().enumerate() {
                let q = [t[0] - off[0] * s, t[1] - off[1] * s, t[2] - off[2] * s];
                if let Some(i) = input.row_of(q) {
                    p.input_rows.push(i as u32);
                    p.output_rows.push(o as u32);
                }
            }
            p
        })
        .collect();
    Ok(KernelMap {
        kernel,
        offsets,
        pairs,
        input_len: input.len(),
        output_len: target.len(),
    })
}

fn gather_rows<T: Real>(src: &Mat<T>, rows: &[u32]) -> Mat<T> {
    let c = src.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(src.row(r as usize));
    }
    Mat::from_vec(rows.len(), c, data)
}

fn scatter_add_rows<T: Real>(dst: &mut Mat<T>, rows: &[u32], src: &Mat<T>) {
    for (k, &r) in rows.iter().enumerate() {
        for (d, &s) in dst.row_mut(r as usize).iter_mut().zip(src.row(k)) {
            *d += s;
        }
    }
}

/// Rows `offset * c_in .. (offset + 1) * c_in` of a stacked `[K^3 * C_in, C_out]` weight.
fn offset_weight<T: Real>(weight: &Mat<T>, offset: usize, c_in: usize) -> Mat<T> {
    let c_out = weight.cols();
    Mat::from_vec(
        c_in,
        c_out,
        weight.as_slice()[offset * c_in * c_out..(offset + 1) * c_in * c_out].to_vec(),
    )
}

/// `out[u] += sum_i W_i^T f[u + i]` in fixed offset order.
///
/// `weight` stacks the per-offset `[C_in, C_out]` matrices row-wise.
pub fn conv_accumulate<T: Real>(input: &Mat<T>, weight: &Mat<T>, map: &KernelMap, out: &mut Mat<T>) {
    let c_in = input.cols();
    debug_assert_eq!(weight.rows(), map.offsets.len() * c_in);
    for (k, p) in map.pairs.iter().enumerate() {
        if p.is_empty() {
            continue;
        }
        let w = offset_weight(weight, k, c_in);
        if map.input_len == map.output_len && p.is_identity(map.output_len) {
            gemm_into(input, false, &w, false, out, T::ONE);
        } else {
            let g = gather_rows(input, &p.input_rows);
            let t = g.matmul(&w);
            scatter_add_rows(out, &p.output_rows, &t);
        }
    }
}

/// Gradients of `conv_accumulate`: returns (d input, d weight).
pub fn conv_backward<T: Real>(
    input: &Mat<T>,
    weight: &Mat<T>,
    map: &KernelMap,
    grad_out: &Mat<T>,
) -> (Mat<T>, Mat<T>) {
    let c_in = input.cols();
    let c_out = weight.cols();
    let mut grad_in = Mat::zeros(input.rows(), c_in);
    let mut grad_w = Mat::zeros(weight.rows(), c_out);
    for (k, p) in map.pairs.iter().enumerate() {
        if p.is_empty() {
            continue;
        }
        let w = offset_weight(weight, k, c_in);
        let mut gw = Mat::zeros(c_in, c_out);
        if map.input_len == map.output_len && p.is_identity(map.output_len) {
            gemm_into(grad_out, false, &w, true, &mut grad_in, T::ONE);
            gemm_into(input, true, grad_out, false, &mut gw, T::ZERO);
        } else {
            let g = gather_rows(input, &p.input_rows);
            let go = gather_rows(grad_out, &p.output_rows);
            let mut gi = Mat::zeros(p.len(), c_in);
            gemm_into(&go, false, &w, true, &mut gi, T::ZERO);
            scatter_add_rows(&mut grad_in, &p.input_rows, &gi);
            gemm_into(&g, true, &go, false, &mut gw, T::ZERO);
        }
        grad_w.as_mut_slice()[k * c_in * c_out..(k + 1) * c_in * c_out]
            .copy_from_slice(gw.as_slice());
    }
    (grad_in, grad_w)
}

/// Convolution weights: `[K^3 * C_in, C_out]` stacked per offset, plus optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T> {
    pub kernel: usize,
    pub weight: Mat<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> ConvWeights<T> {
    pub fn new(kernel: usize, weight: Mat<T>, bias: Option<Vec<T>>) -> Result<Self, SparseError> {
        let k3 = kernel.pow(3);
        if kernel % 2 == 0 || weight.rows() % k3 != 0 {
            return Err(SparseError::Shape(format!(
                "weight rows {} not a multiple of {k3}",
                weight.rows()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != weight.cols() {
                return Err(SparseError::Shape("bias length".into()));
            }
        }
        Ok(Self {
            kernel,
            weight,
            bias,
        })
    }

    pub fn zeros(kernel: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            kernel,
            weight: Mat::zeros(kernel.pow(3) * c_in, c_out),
            bias: None,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.rows() / self.kernel.pow(3)
    }

    pub fn c_out(&self) -> usize {
        self.weight.cols()
    }

    /// Weights of the exact adjoint map: every per-offset block transposed.
    pub fn transposed_blocks(&self) -> Self {
        let (ci, co) = (self.c_in(), self.c_out());
        let mut w = Mat::zeros(self.kernel.pow(3) * co, ci);
        for k in 0..self.kernel.pow(3) {
            for a in 0..ci {
                for b in 0..co {
                    w[(k * co + b, a)] = self.weight[(k * ci + a, b)];
                }
            }
        }
        Self {
            kernel: self.kernel,
            weight: w,
            bias: None,
        }
    }
}

/// Coordinates plus an `N x C` feature matrix.
#[derive(Clone, Debug)]
pub struct SparseTensor<T> {
    pub coords: Arc<CoordSet>,
    pub feats: Mat<T>,
}

impl<T: Real> SparseTensor<T> {
    pub fn new(coords: Arc<CoordSet>, feats: Mat<T>) -> Result<Self, SparseError> {
        if coords.len() != feats.rows() {
            return Err(SparseError::Shape(format!(
                "{} coordinates vs {} feature rows",
                coords.len(),
                feats.rows()
            )));
        }
        Ok(Self { coords, feats })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    pub fn stride(&self) -> i32 {
        self.coords.stride()
    }
}

fn add_bias<T: Real>(out: &mut Mat<T>, bias: &Option<Vec<T>>) {
    if let Some(b) = bias {
        for r in 0..out.rows() {
            for (v, &bv) in out.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
}

/// Sparse convolution to `out_stride`, which must equal the input stride or twice it.
pub fn sparse_conv<T: Real>(
    input: &SparseTensor<T>,
    w: &ConvWeights<T>,
    out_stride: i32,
) -> Result<SparseTensor<T>, SparseError> {
    if w.c_in() != input.channels() {
        return Err(SparseError::Shape(format!(
            "weights expect {} input channels, tensor has {}",
            w.c_in(),
            input.channels()
        )));
    }
    let out_coords = if out_stride == input.stride() {
        input.coords.clone()
    } else if out_stride == 2 * input.stride() {
        Arc::new(input.coords.downsample())
    } else {
        return Err(SparseError::Stride(format!(
            "cannot convolve stride {} to {out_stride}",
            input.stride()
        )));
    };
    let map = build_kernel_map(&input.coords, &out_coords, w.kernel);
    let mut out = Mat::zeros(out_coords.len(), w.c_out());
    conv_accumulate(&input.feats, &w.weight, &map, &mut out);
    add_bias(&mut out, &w.bias);
    SparseTensor::new(out_coords, out)
}

/// Transposed (upsampling) convolution onto exactly `target` coordinates.
pub fn sparse_conv_transpose<T: Real>(
    input: &SparseTensor<T>,
    w: &ConvWeights<T>,
    target: Arc<CoordSet>,
) -> Result<SparseTensor<T>, SparseError> {
    if w.c_in() != input.channels() {
        return Err(SparseError::Shape(format!(
            "weights expect {} input channels, tensor has {}",
            w.c_in(),
            input.channels()
        )));
    }
    let map = build_transpose_kernel_map(&input.coords, &target, w.kernel)?;
    let mut out = Mat::zeros(target.len(), w.c_out());
    conv_accumulate(&input.feats, &w.weight, &map, &mut out);
    add_bias(&mut out, &w.bias);
    SparseTensor::new(target, out)
}

/// Column means (`1 x C`).
pub fn spatial_avg_pool<T: Real>(input: &SparseTensor<T>) -> Result<Mat<T>, SparseError> {
    if input.is_empty() {
        return Err(SparseError::Empty);
    }
    Ok(col_means(&input.feats))
}

/// Row means (`N x 1`).
pub fn channel_avg_pool<T: Real>(input: &SparseTensor<T>) -> Result<Mat<T>, SparseError> {
    if input.is_empty() {
        return Err(SparseError::Empty);
    }
    Ok(row_means(&input.feats))
}

pub(crate) fn col_means<T: Real>(m: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    let inv = T::ONE / T::from_f64(m.rows() as f64);
    out.map(|v| v * inv)
}

pub(crate) fn row_means<T: Real>(m: &Mat<T>) -> Mat<T> {
    let inv = T::ONE / T::from_f64(m.cols() as f64);
    Mat::from_fn(m.rows(), 1, |r, _| {
        let mut s = T::ZERO;
        for &v in m.row(r) {
            s += v;
        }
        s * inv
    })
}
