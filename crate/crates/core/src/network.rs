//! Analysis / synthesis transforms, hyperprior, slice-wise channel context and
//! the weights file.
//!
//! Topology (strides in voxels):
//!
//! ```text
//! encoder   1 --conv s2--> 2 [TSCM] --conv s2--> 4 [TSCM] --conv s2--> 8   y
//! hyper     8 --conv s2--> 16 [TSCM] --conv1--> z
//!           z --conv1--> [TSCM] --convT--> 8   (mu', log sigma')
//! decoder   8 --convT--> 4 [TSCM] --convT--> 2 [TSCM] --convT--> 1   YUV
//! ```

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{round_half_away, AutodiffError, Graph, ParamId, ParamStore, Var};
use crate::coder::ESCAPE_BITS;
use crate::blocks::{Conv, Init, SparseLevel, Tscm, TscmConfig};
use crate::pcio::COLOR_MATRIX_ID;
use crate::sparse::{build_kernel_map, build_transpose_kernel_map, Coord, CoordSet, KernelMap, SparseError};
use crate::tensor::{Mat, Real};

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid codec configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("point cloud is empty")]
    Empty,
    #[error("weights file: {0}")]
    Weights(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Res<T> = Result<T, NetworkError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub feature_channels: usize,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub context_channels: usize,
    pub slice_count: usize,
    pub downsample_stages: usize,
    pub hyper_downsample_stages: usize,
    pub kernel: usize,
    pub window_side: i32,
    pub head_count: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            feature_channels: 128,
            latent_channels: 128,
            hyper_channels: 64,
            context_channels: 32,
            slice_count: 8,
            downsample_stages: 3,
            hyper_downsample_stages: 1,
            kernel: 3,
            window_side: 8,
            head_count: 4,
            sigma_min: 0.04,
            sigma_max: 64.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Res<()> {
        let bad = |m: String| Err(NetworkError::Config(m));
        if self.slice_count == 0 || self.latent_channels % self.slice_count != 0 {
            return bad(format!(
                "latent_channels {} not divisible by slice_count {}",
                self.latent_channels, self.slice_count
            ));
        }
        if self.downsample_stages != 3 || self.hyper_downsample_stages != 1 {
            return bad("the topology is fixed at 3 encoder and 1 hyper downsampling stages".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        for (what, c) in [("feature", self.feature_channels), ("context", self.context_channels)] {
            if c == 0 || c % 2 != 0 || (c / 2) % self.head_count.max(1) != 0 || self.head_count == 0 {
                return bad(format!("{what} channels {c} must split into two halves divisible by {} heads", self.head_count));
            }
        }
        if self.hyper_channels == 0 || self.window_side < 1 {
            return bad("hyper_channels and window_side must be positive".into());
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return bad(format!("sigma range [{}, {}]", self.sigma_min, self.sigma_max));
        }
        Ok(())
    }

    fn tscm(&self, channels: usize) -> TscmConfig {
        TscmConfig {
            channels,
            heads: self.head_count,
            window_side: self.window_side,
            kernel: self.kernel,
        }
    }

    /// First 8 bytes of SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> [u8; 8] {
        let json = serde_json::to_vec(self).expect("config serializes");
        let full = Sha256::digest(&json);
        let mut out = [0u8; 8];
        out.copy_from_slice(&full[..8]);
        out
    }

    pub fn slice_plan(&self) -> SlicePlan {
        SlicePlan::new(self.latent_channels, self.slice_count).expect("validated config")
    }
}

/// Contiguous equal-width channel ranges of the latent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlicePlan {
    pub ranges: Vec<Range<usize>>,
}

impl SlicePlan {
    pub fn new(channels: usize, count: usize) -> Res<Self> {
        if count == 0 || channels % count != 0 {
            return Err(NetworkError::Config(format!("{channels} channels into {count} slices")));
        }
        let w = channels / count;
        Ok(Self {
            ranges: (0..count).map(|i| i * w..(i + 1) * w).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ranges[0].len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }
}

/// Round half away from zero.
pub fn quantize<T: Real>(y: &Mat<T>) -> Mat<T> {
    y.map(round_half_away)
}

/// Coordinates and maps for strides 1, 2, 4, 8 and 16, all derived from geometry.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub levels: Vec<SparseLevel>,
    /// `down[l]`: stride-doubling conv map from level `l` to `l + 1`
    pub down: Vec<Arc<KernelMap>>,
    /// `up[l]`: transposed conv map from level `l + 1` back to `l`
    pub up: Vec<Arc<KernelMap>>,
}

impl Geometry {
    pub fn new(coords: Vec<Coord>, config: &CodecConfig) -> Res<Self> {
        if coords.is_empty() {
            return Err(NetworkError::Empty);
        }
        let depth = config.downsample_stages + config.hyper_downsample_stages;
        let mut sets = vec![Arc::new(CoordSet::new(coords, 1)?)];
        for _ in 0..depth {
            let next = sets.last().expect("nonempty").downsample();
            sets.push(Arc::new(next));
        }
        let mut down = Vec::with_capacity(depth);
        let mut up = Vec::with_capacity(depth);
        for l in 0..depth {
            down.push(Arc::new(build_kernel_map(&sets[l], &sets[l + 1], config.kernel)));
            up.push(Arc::new(build_transpose_kernel_map(&sets[l + 1], &sets[l], config.kernel)?));
        }
        let levels = sets
            .into_iter()
            .map(|s| SparseLevel::new(s, config.kernel, config.window_side))
            .collect();
        Ok(Self { levels, down, up })
    }

    pub fn point_count(&self) -> usize {
        self.levels[0].len()
    }

    pub fn latent_len(&self) -> usize {
        self.levels[3].len()
    }

    pub fn hyper_len(&self) -> usize {
        self.levels[4].len()
    }
}

/// `concat -> conv1 -> TSCM -> conv1` producing one slice's worth of channels.
#[derive(Clone, Debug)]
pub struct ContextTransform {
    pub input: Conv,
    pub tscm: Tscm,
    pub output: Conv,
}

impl ContextTransform {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        config: &CodecConfig,
    ) -> Res<Self> {
        let c = config.context_channels;
        Ok(Self {
            input: Conv::new(store, init, &format!("{name}.in"), 1, c_in, c, true, 1.0)?,
            tscm: Tscm::new(store, init, &format!("{name}.tscm"), config.tscm(c))?,
            output: Conv::new(store, init, &format!("{name}.out"), 1, c, c_out, true, 1.0)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, parts: &[Var], level: &SparseLevel) -> Res<Var> {
        let x = if parts.len() == 1 { parts[0] } else { g.concat(parts)? };
        let h = self.input.pointwise(g, x)?;
        let h = self.tscm.forward(g, h, level)?;
        Ok(self.output.pointwise(g, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct SliceContext {
    pub mean: ContextTransform,
    pub scale: ContextTransform,
    pub error: ContextTransform,
}

/// Handles to every parameter group of the codec.
#[derive(Clone, Debug)]
pub struct CodecModel {
    pub config: CodecConfig,
    pub plan: SlicePlan,
    pub enc_conv: Vec<Conv>,
    pub enc_tscm: Vec<Tscm>,
    pub dec_conv: Vec<Conv>,
    pub dec_tscm: Vec<Tscm>,
    pub hyper_enc_conv: Conv,
    pub hyper_enc_tscm: Tscm,
    pub hyper_enc_out: Conv,
    pub hyper_dec_in: Conv,
    pub hyper_dec_tscm: Tscm,
    pub hyper_dec_conv: Conv,
    pub context: Vec<SliceContext>,
    pub z_mean: ParamId,
    pub z_log_scale: ParamId,
}

/// Per-slice nodes of the channel context: `y_bar_i = y_hat_i + error`.
#[derive(Clone, Copy, Debug)]
pub struct SliceOutputs {
    pub y_hat: Var,
    pub mu: Var,
    pub sigma: Var,
    pub error: Var,
    pub refined: Var,
}

/// Outputs of the differentiable forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub reconstruction: Var,
    pub bits_y: Var,
    pub bits_z: Var,
}

impl CodecModel {
    /// Register all parameters in `store` with seeded initial values.
    pub fn build<T: Real>(config: &CodecConfig, store: &mut ParamStore<T>, seed: u64) -> Res<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let it = &mut init;
        let (f, l, h, k) = (
            config.feature_channels,
            config.latent_channels,
            config.hyper_channels,
            config.kernel,
        );
        let plan = config.slice_plan();
        let w = plan.width();

        let enc_conv = vec![
            Conv::new(store, it, "enc.conv0", k, 3, f, true, 1.0)?,
            Conv::new(store, it, "enc.conv1", k, f, f, true, 1.0)?,
            Conv::new(store, it, "enc.conv2", k, f, l, true, 1.0)?,
        ];
        let enc_tscm = vec![
            Tscm::new(store, it, "enc.tscm0", config.tscm(f))?,
            Tscm::new(store, it, "enc.tscm1", config.tscm(f))?,
        ];
        let dec_conv = vec![
            Conv::new(store, it, "dec.conv0", k, l, f, true, 1.0)?,
            Conv::new(store, it, "dec.conv1", k, f, f, true, 1.0)?,
            Conv::new(store, it, "dec.conv2", k, f, 3, true, 1.0)?,
        ];
        let dec_tscm = vec![
            Tscm::new(store, it, "dec.tscm0", config.tscm(f))?,
            Tscm::new(store, it, "dec.tscm1", config.tscm(f))?,
        ];
        // start the reconstruction at mid-gray
        if let Some(b) = dec_conv[2].bias {
            *store.value_mut(b) = Mat::filled(1, 3, T::from_f64(0.5));
        }
        let hyper_enc_conv = Conv::new(store, it, "hyper_enc.conv", k, l, f, true, 1.0)?;
        let hyper_enc_tscm = Tscm::new(store, it, "hyper_enc.tscm", config.tscm(f))?;
        let hyper_enc_out = Conv::new(store, it, "hyper_enc.out", 1, f, h, true, 1.0)?;
        let hyper_dec_in = Conv::new(store, it, "hyper_dec.in", 1, h, f, true, 1.0)?;
        let hyper_dec_tscm = Tscm::new(store, it, "hyper_dec.tscm", config.tscm(f))?;
        let hyper_dec_conv = Conv::new(store, it, "hyper_dec.conv", k, f, 2 * l, true, 1.0)?;

        let mut context = Vec::with_capacity(plan.len());
        for i in 0..plan.len() {
            let prev = i * w;
            context.push(SliceContext {
                mean: ContextTransform::new(store, it, &format!("ctx{i}.mean"), prev + l, w, config)?,
                scale: ContextTransform::new(store, it, &format!("ctx{i}.scale"), prev + l, w, config)?,
                error: ContextTransform::new(store, it, &format!("ctx{i}.error"), prev + w + l, w, config)?,
            });
        }
        let z_mean = store.add("z_prior.mean", Mat::zeros(1, h))?;
        let z_log_scale = store.add("z_prior.log_scale", Mat::zeros(1, h))?;
        Ok(Self {
            config: config.clone(),
            plan,
            enc_conv,
            enc_tscm,
            dec_conv,
            dec_tscm,
            hyper_enc_conv,
            hyper_enc_tscm,
            hyper_enc_out,
            hyper_dec_in,
            hyper_dec_tscm,
            hyper_dec_conv,
            context,
            z_mean,
            z_log_scale,
        })
    }

    /// `N x 3` YUV at stride 1 to the stride-8 latent `y`.
    pub fn analysis<T: Real>(&self, g: &mut Graph<'_, T>, geo: &Geometry, x: Var) -> Res<Var> {
        let mut h = x;
        for s in 0..3 {
            h = self.enc_conv[s].forward(g, h, &geo.down[s])?;
            if s < 2 {
                h = self.enc_tscm[s].forward(g, h, &geo.levels[s + 1])?;
            }
        }
        Ok(h)
    }

    /// Stride-8 latent to `N x 3` YUV (unclamped).
    pub fn synthesis<T: Real>(&self, g: &mut Graph<'_, T>, geo: &Geometry, latent: Var) -> Res<Var> {
        let mut h = latent;
        for s in 0..3 {
            let target = 2 - s;
            h = self.dec_conv[s].forward(g, h, &geo.up[target])?;
            if s < 2 {
                h = self.dec_tscm[s].forward(g, h, &geo.levels[target])?;
            }
        }
        Ok(h)
    }

    pub fn hyper_analysis<T: Real>(&self, g: &mut Graph<'_, T>, geo: &Geometry, y: Var) -> Res<Var> {
        let h = self.hyper_enc_conv.forward(g, y, &geo.down[3])?;
        let h = self.hyper_enc_tscm.forward(g, h, &geo.levels[4])?;
        Ok(self.hyper_enc_out.pointwise(g, h)?)
    }

    /// `(mu', sigma')` at stride 8.
    pub fn hyper_synthesis<T: Real>(&self, g: &mut Graph<'_, T>, geo: &Geometry, z_hat: Var) -> Res<(Var, Var)> {
        let h = self.hyper_dec_in.pointwise(g, z_hat)?;
        let h = self.hyper_dec_tscm.forward(g, h, &geo.levels[4])?;
        let p = self.hyper_dec_conv.forward(g, h, &geo.up[3])?;
        let l = self.config.latent_channels;
        let parts = g.split(p, &[l, l])?;
        let sigma = self.scale_from_log(g, parts[1])?;
        Ok((parts[0], sigma))
    }

    /// `exp(clamp(v, ln sigma_min, ln sigma_max))`.
    pub fn scale_from_log<T: Real>(&self, g: &mut Graph<'_, T>, v: Var) -> Res<Var> {
        let c = g.clamp(v, self.config.sigma_min.ln(), self.config.sigma_max.ln())?;
        Ok(g.exp(c)?)
    }

    /// Learned per-channel Gaussian for `z_hat`, broadcast to `rows`.
    pub fn z_prior<T: Real>(&self, g: &mut Graph<'_, T>, rows: usize) -> Res<(Var, Var)> {
        let h = self.config.hyper_channels;
        let zero = g.constant(Mat::zeros(rows, h));
        let m = g.param(self.z_mean);
        let mean = g.add_row(zero, m)?;
        let ls = g.param(self.z_log_scale);
        let ls = g.add_row(zero, ls)?;
        let scale = self.scale_from_log(g, ls)?;
        Ok((mean, scale))
    }

    /// Refined `(mu_i, sigma_i)` of slice `i` from `y_bar_{<i}` and the hyper outputs.
    pub fn slice_params<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        geo: &Geometry,
        i: usize,
        refined_prev: &[Var],
        mu_h: Var,
        sigma_h: Var,
    ) -> Res<(Var, Var)> {
        let level = &geo.levels[3];
        let mut parts = refined_prev.to_vec();
        parts.push(mu_h);
        let mu = self.context[i].mean.forward(g, &parts, level)?;
        parts.pop();
        parts.push(sigma_h);
        let raw = self.context[i].scale.forward(g, &parts, level)?;
        let sigma = self.scale_from_log(g, raw)?;
        Ok((mu, sigma))
    }

    /// `y_bar_i = y_hat_i + T_y(y_bar_{<i}, y_hat_i, mu')`.
    pub fn slice_refine<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        geo: &Geometry,
        i: usize,
        refined_prev: &[Var],
        y_hat_i: Var,
        mu_h: Var,
    ) -> Res<Var> {
        let mut parts = refined_prev.to_vec();
        parts.push(y_hat_i);
        parts.push(mu_h);
        let e = self.context[i].error.forward(g, &parts, &geo.levels[3])?;
        Ok(g.add(y_hat_i, e)?)
    }

    /// Sequential slice refinement of `y_hat` given the hyper outputs.
    pub fn channel_context<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        geo: &Geometry,
        y_hat: Var,
        mu_h: Var,
        sigma_h: Var,
    ) -> Res<Vec<SliceOutputs>> {
        let slices = g.split(y_hat, &self.plan.widths())?;
        let mut refined: Vec<Var> = Vec::with_capacity(slices.len());
        let mut out = Vec::with_capacity(slices.len());
        for (i, &yi) in slices.iter().enumerate() {
            let (mu, sigma) = self.slice_params(g, geo, i, &refined, mu_h, sigma_h)?;
            let bar = self.slice_refine(g, geo, i, &refined, yi, mu_h)?;
            let error = g.sub(bar, yi)?;
            refined.push(bar);
            out.push(SliceOutputs {
                y_hat: yi,
                mu,
                sigma,
                error,
                refined: bar,
            });
        }
        Ok(out)
    }

    /// Full differentiable pipeline with straight-through rounding.
    ///
    /// With `context` false, `y_hat` is modeled by the hyper outputs directly
    /// and fed to the decoder unrefined.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, geo: &Geometry, x: Var, context: bool) -> Res<ForwardVars> {
        let y = self.analysis(g, geo, x)?;
        let y_hat = g.round_ste(y)?;
        let z = self.hyper_analysis(g, geo, y)?;
        let z_hat = g.round_ste(z)?;
        let (zm, zs) = self.z_prior(g, geo.hyper_len())?;
        let bits_z = g.gaussian_bits(z_hat, zm, zs, ESCAPE_BITS)?;
        let (mu_h, sigma_h) = self.hyper_synthesis(g, geo, z_hat)?;

        let (bits_y, latent) = if context {
            let slices = self.channel_context(g, geo, y_hat, mu_h, sigma_h)?;
            let mut bits: Option<Var> = None;
            for s in &slices {
                let b = g.gaussian_bits(s.y_hat, s.mu, s.sigma, ESCAPE_BITS)?;
                bits = Some(match bits {
                    Some(acc) => g.add(acc, b)?,
                    None => b,
                });
            }
            let refined: Vec<Var> = slices.iter().map(|s| s.refined).collect();
            (bits.expect("at least one slice"), g.concat(&refined)?)
        } else {
            (g.gaussian_bits(y_hat, mu_h, sigma_h, ESCAPE_BITS)?, y_hat)
        };
        let reconstruction = self.synthesis(g, geo, latent)?;
        Ok(ForwardVars {
            reconstruction,
            bits_y,
            bits_z,
        })
    }

    /// Parameter groups by name prefix, for per-group gradient checks.
    pub fn groups(&self) -> Vec<&'static str> {
        vec!["enc.", "dec.", "hyper_enc.", "hyper_dec.", "ctx", "z_prior."]
    }
}

/// Model handles plus parameter values.
#[derive(Clone, Debug)]
pub struct Codec<T: Real> {
    pub model: CodecModel,
    pub params: ParamStore<T>,
    pub meta: WeightsMeta,
}

/// Non-tensor facts stored with the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub context_enabled: bool,
    pub lambda: f64,
}

impl Default for WeightsMeta {
    fn default() -> Self {
        Self {
            context_enabled: true,
            lambda: 0.0,
        }
    }
}

/// Reconstruction and rate estimates from [`forward_codec`].
#[derive(Clone, Debug)]
pub struct CodecOutput<T> {
    pub reconstruction: Mat<T>,
    pub rate_y_bits: f64,
    pub rate_z_bits: f64,
}

impl<T: Real> Codec<T> {
    pub fn new(config: &CodecConfig, seed: u64) -> Res<Self> {
        let mut params = ParamStore::new();
        let model = CodecModel::build(config, &mut params, seed)?;
        Ok(Self {
            model,
            params,
            meta: WeightsMeta::default(),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.model.config
    }

    pub fn geometry(&self, coords: Vec<Coord>) -> Res<Geometry> {
        Geometry::new(coords, &self.model.config)
    }

    pub fn cast<U: Real>(&self) -> Codec<U> {
        Codec {
            model: self.model.clone(),
            params: self.params.cast(),
            meta: self.meta.clone(),
        }
    }
}

/// Evaluation pass: hard rounding, rates from the discretized Gaussian model,
/// reconstruction clamped to `[0, 1]`.
pub fn forward_codec<T: Real>(codec: &Codec<T>, geo: &Geometry, attrs: &Mat<T>) -> Res<CodecOutput<T>> {
    let mut g = Graph::with_params(&codec.params);
    let x = g.constant(attrs.clone());
    let out = codec.model.forward(&mut g, geo, x, codec.meta.context_enabled)?;
    let reconstruction = g.value(out.reconstruction).map(clamp_unit);
    Ok(CodecOutput {
        reconstruction,
        rate_y_bits: g.scalar(out.bits_y),
        rate_z_bits: g.scalar(out.bits_z),
    })
}

pub fn clamp_unit<T: Real>(v: T) -> T {
    if v < T::ZERO {
        T::ZERO
    } else if v > T::ONE {
        T::ONE
    } else {
        v
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    color_matrix: String,
    config: CodecConfig,
    meta: WeightsMeta,
    tensors: Vec<TensorEntry>,
}

/// `[u32 manifest length][JSON manifest][f32 LE blobs in manifest order]`.
pub fn write_tensor_file<T: Real>(
    out: &mut impl Write,
    config: &CodecConfig,
    meta: &WeightsMeta,
    tensors: &[(&str, &Mat<T>)],
) -> Res<()> {
    let manifest = Manifest {
        format_version: WEIGHTS_FORMAT_VERSION,
        color_matrix: COLOR_MATRIX_ID.to_string(),
        config: config.clone(),
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(n, m)| TensorEntry {
                name: n.to_string(),
                shape: [m.rows(), m.cols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, m) in tensors {
        buf.clear();
        for &v in m.as_slice() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

type TensorFile<T> = (CodecConfig, WeightsMeta, Vec<(String, Mat<T>)>);

pub fn read_tensor_file<T: Real>(input: &mut impl Read) -> Res<TensorFile<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let err = |m: &str| NetworkError::Weights(m.to_string());
    if bytes.len() < 4 {
        return Err(err("truncated manifest length"));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(4..4 + len).ok_or_else(|| err("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.format_version != WEIGHTS_FORMAT_VERSION {
        return Err(NetworkError::Weights(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if manifest.color_matrix != COLOR_MATRIX_ID {
        return Err(NetworkError::Weights(format!(
            "unsupported color matrix '{}'",
            manifest.color_matrix
        )));
    }
    let mut pos = 4 + len;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n = t.shape[0] * t.shape[1];
        let raw = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| NetworkError::Weights(format!("tensor '{}' is truncated", t.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        tensors.push((t.name.clone(), Mat::from_vec(t.shape[0], t.shape[1], data)));
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(err("trailing bytes after the last tensor"));
    }
    Ok((manifest.config, manifest.meta, tensors))
}

impl<T: Real> Codec<T> {
    pub fn save(&self, path: &Path) -> Res<()> {
        let tensors: Vec<(&str, &Mat<T>)> = self.params.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_tensor_file(&mut f, &self.model.config, &self.meta, &tensors)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Res<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let (config, meta, tensors) = read_tensor_file::<T>(&mut f)?;
        let mut codec = Self::new(&config, 0)?;
        codec.meta = meta;
        if tensors.len() != codec.params.len() {
            return Err(NetworkError::Weights(format!(
                "expected {} tensors, file has {}",
                codec.params.len(),
                tensors.len()
            )));
        }
        for (name, value) in tensors {
            let id = codec
                .params
                .id(&name)
                .ok_or_else(|| NetworkError::Weights(format!("unknown tensor '{name}'")))?;
            if codec.params.value(id).shape() != value.shape() {
                return Err(NetworkError::Weights(format!("tensor '{name}' has wrong shape")));
            }
            *codec.params.value_mut(id) = value;
        }
        Ok(codec)
    }
}
