//! Network building blocks: sparse convolution layers, residual block, windowed
//! local attention, the voxel-based global block and the two-stage block that
//! combines them.
//!
//! Every block maps an `N x C` feature matrix on a fixed coordinate set to a
//! new `N x C` matrix on the same coordinates, in the same row order.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, RowGroups, Var};
use crate::sparse::{build_kernel_map, Coord, CoordSet, KernelMap, SparseTensor};
use crate::tensor::{Mat, Real};

type Res<T> = Result<T, AutodiffError>;

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-gain / sqrt(fan_in), gain / sqrt(fan_in)]`.
    pub fn uniform<T: Real>(&mut self, rows: usize, cols: usize, fan_in: usize, gain: f64) -> Mat<T> {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        Mat::from_fn(rows, cols, |_, _| T::from_f64(self.rng.random_range(-bound..=bound)))
    }
}

/// Coordinates of one resolution level plus the maps every block needs there.
#[derive(Clone, Debug)]
pub struct SparseLevel {
    pub coords: Arc<CoordSet>,
    /// stride-preserving K=3 neighborhood map
    pub neighbors: Arc<KernelMap>,
    /// attention windows
    pub windows: RowGroups,
}

impl SparseLevel {
    pub fn new(coords: Arc<CoordSet>, kernel: usize, window_side: i32) -> Self {
        let neighbors = Arc::new(build_kernel_map(&coords, &coords, kernel));
        let windows = Arc::new(window_partition(coords.coords(), coords.stride(), window_side));
        Self {
            coords,
            neighbors,
            windows,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Group rows by `floor(coord / (stride * window_side))`.
///
/// Groups appear in order of their first row; rows keep tensor order inside a group.
pub fn window_partition(coords: &[Coord], stride: i32, window_side: i32) -> Vec<Vec<u32>> {
    let cell = stride * window_side.max(1);
    let mut slot: HashMap<Coord, usize> = HashMap::new();
    let mut groups: Vec<Vec<u32>> = Vec::new();
    for (r, c) in coords.iter().enumerate() {
        let key = c.map(|v| v.div_euclid(cell));
        let g = *slot.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(r as u32);
    }
    groups
}

/// Sparse convolution layer with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        bias: bool,
        gain: f64,
    ) -> Res<Self> {
        let k3 = kernel.pow(3);
        let weight = store.add(
            format!("{name}.weight"),
            init.uniform(k3 * c_in, c_out, k3 * c_in, gain),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Mat::zeros(1, c_out))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel,
            c_in,
            c_out,
        })
    }

    fn check(&self, g: &Graph<'_, impl Real>, x: Var) -> Res<()> {
        if g.shape(x).1 != self.c_in {
            return Err(AutodiffError::Shape {
                op: "conv",
                lhs: g.shape(x),
                rhs: (self.c_in, self.c_out),
            });
        }
        Ok(())
    }

    fn bias<T: Real>(&self, g: &mut Graph<'_, T>, y: Var) -> Res<Var> {
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Convolution over a prebuilt kernel map.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, map: &Arc<KernelMap>) -> Res<Var> {
        self.check(g, x)?;
        let w = g.param(self.weight);
        let y = g.sparse_conv(x, w, map.clone())?;
        self.bias(g, y)
    }

    /// Kernel-size-1 convolution at the input's own coordinates.
    pub fn pointwise<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Res<Var> {
        debug_assert_eq!(self.kernel, 1);
        self.check(g, x)?;
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        self.bias(g, y)
    }
}

/// `y = x + Conv3(relu(Conv3(x)))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        kernel: usize,
    ) -> Res<Self> {
        Ok(Self {
            conv1: Conv::new(store, init, &format!("{name}.conv1"), kernel, channels, channels, true, 1.0)?,
            conv2: Conv::new(store, init, &format!("{name}.conv2"), kernel, channels, channels, true, 0.5)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, level: &SparseLevel) -> Res<Var> {
        let h = self.conv1.forward(g, x, &level.neighbors)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, h, &level.neighbors)?;
        g.add(x, h)
    }
}

/// Multi-head softmax attention inside coordinate windows, no positional terms.
#[derive(Clone, Debug)]
pub struct LocalAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub channels: usize,
}

impl LocalAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        heads: usize,
    ) -> Res<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(AutodiffError::Invalid(format!(
                "{channels} channels not divisible by {heads} heads"
            )));
        }
        let mut lin = |n: &str| store.add(format!("{name}.{n}"), init.uniform(channels, channels, channels, 1.0));
        Ok(Self {
            wq: lin("wq")?,
            wk: lin("wk")?,
            wv: lin("wv")?,
            wo: lin("wo")?,
            heads,
            channels,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, windows: &RowGroups) -> Res<Var> {
        if g.shape(x).1 != self.channels {
            return Err(AutodiffError::Shape {
                op: "local_attention",
                lhs: g.shape(x),
                rhs: (self.channels, self.channels),
            });
        }
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let a = g.window_attention(q, k, v, windows.clone(), self.heads)?;
        g.matmul(a, wo)
    }
}

/// Pooling-based global feature sharpening with pointwise convolutions:
///
/// `h = Conv1(x)`, `F_OS = mean over voxels of h` (`1 x C`),
/// `F_OC = sqrt_signed(mean over channels of h)` (`N x 1`),
/// `out = Conv1(h - F_OC F_OS)`.
#[derive(Clone, Debug)]
pub struct VoxelGlobalBlock {
    pub pre: Conv,
    pub post: Conv,
}

impl VoxelGlobalBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, channels: usize) -> Res<Self> {
        Ok(Self {
            pre: Conv::new(store, init, &format!("{name}.pre"), 1, channels, channels, true, 1.0)?,
            post: Conv::new(store, init, &format!("{name}.post"), 1, channels, channels, true, 1.0)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Res<Var> {
        let h = self.pre.pointwise(g, x)?;
        let spatial = g.mean_over_rows(h)?;
        let channel = g.mean_over_cols(h)?;
        let channel = g.sqrt_signed(channel)?;
        let global = g.matmul(channel, spatial)?;
        let sharpened = g.sub(h, global)?;
        self.post.pointwise(g, sharpened)
    }
}

/// Hyper-parameters of a two-stage block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TscmConfig {
    pub channels: usize,
    pub heads: usize,
    pub window_side: i32,
    pub kernel: usize,
}

impl TscmConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            heads: 4,
            window_side: 8,
            kernel: 3,
        }
    }
}

/// Two-stage transformer / sparse-convolution block.
///
/// Stage 1 splits a pointwise projection of the input into an attention half
/// and a residual half, fuses them back with a pointwise convolution and adds
/// the input. Stage 2 splits that result into a global-block half and a
/// residual half, fuses and adds again.
#[derive(Clone, Debug)]
pub struct Tscm {
    pub config: TscmConfig,
    pub split: Conv,
    pub attention: LocalAttention,
    pub local_residual: ResidualBlock,
    pub fuse1: Conv,
    pub global: VoxelGlobalBlock,
    pub global_residual: ResidualBlock,
    pub fuse2: Conv,
}

impl Tscm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        config: TscmConfig,
    ) -> Res<Self> {
        let c = config.channels;
        if c % 2 != 0 {
            return Err(AutodiffError::Invalid(format!("two-stage block needs even channels, got {c}")));
        }
        let h = c / 2;
        Ok(Self {
            config,
            split: Conv::new(store, init, &format!("{name}.split"), 1, c, c, true, 1.0)?,
            attention: LocalAttention::new(store, init, &format!("{name}.attn"), h, config.heads)?,
            local_residual: ResidualBlock::new(store, init, &format!("{name}.res1"), h, config.kernel)?,
            fuse1: Conv::new(store, init, &format!("{name}.fuse1"), 1, c, c, true, 0.5)?,
            global: VoxelGlobalBlock::new(store, init, &format!("{name}.global"), h)?,
            global_residual: ResidualBlock::new(store, init, &format!("{name}.res2"), h, config.kernel)?,
            fuse2: Conv::new(store, init, &format!("{name}.fuse2"), 1, c, c, true, 0.5)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, level: &SparseLevel) -> Res<Var> {
        let c = self.config.channels;
        if g.shape(x).1 != c {
            return Err(AutodiffError::Shape {
                op: "tscm",
                lhs: g.shape(x),
                rhs: (c, c),
            });
        }
        let h = c / 2;
        let s = self.split.pointwise(g, x)?;
        let halves = g.split(s, &[h, h])?;
        let att = self.attention.forward(g, halves[0], &level.windows)?;
        let cnn = self.local_residual.forward(g, halves[1], level)?;
        let joined = g.concat(&[att, cnn])?;
        let fused = self.fuse1.pointwise(g, joined)?;
        let out1 = g.add(x, fused)?;

        let halves = g.split(out1, &[h, h])?;
        let glo = self.global.forward(g, halves[0])?;
        let cnn = self.global_residual.forward(g, halves[1], level)?;
        let joined = g.concat(&[glo, cnn])?;
        let fused = self.fuse2.pointwise(g, joined)?;
        g.add(out1, fused)
    }

    /// Inference on a standalone tensor.
    pub fn apply<T: Real>(&self, store: &ParamStore<T>, x: &SparseTensor<T>) -> Res<SparseTensor<T>> {
        let level = SparseLevel::new(x.coords.clone(), self.config.kernel, self.config.window_side);
        let mut g = Graph::with_params(store);
        let xi = g.constant(x.feats.clone());
        let y = self.forward(&mut g, xi, &level)?;
        Ok(SparseTensor {
            coords: x.coords.clone(),
            feats: g.value(y).clone(),
        })
    }
}

/// Overwrite every parameter with zeros.
pub fn zero_params<T: Real>(store: &mut ParamStore<T>) {
    for p in store.iter_mut() {
        p.value = Mat::zeros(p.value.rows(), p.value.cols());
    }
}
