//! Whole-cloud encoding and decoding.
//!
//! The encoder runs the decoder's own computation for every entropy model and
//! for the reconstruction, so both sides evaluate identical float operations
//! on identical inputs.

use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::coder::{self, models_from, Bitstream, CoderError, StreamHeader};
use crate::network::{clamp_unit, Codec, Geometry, NetworkError};
use crate::pcio::PointCloud;
use crate::sparse::Coord;
use crate::tensor::Mat;

/// Largest latent magnitude written to a stream; exactly representable in f32.
pub const LATENT_LIMIT: f32 = (1 << 24) as f32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Graph(#[from] crate::autodiff::AutodiffError),
    #[error("bitstream was produced with a different codec configuration")]
    ConfigMismatch,
    #[error("bitstream has {stream} slices, model expects {model}")]
    SliceMismatch { stream: usize, model: usize },
    #[error("bitstream describes {stream} points, geometry has {geometry}")]
    PointCountMismatch { stream: usize, geometry: usize },
    #[error("bitstream context flag disagrees with the weights")]
    ContextMismatch,
}

type Res<T> = Result<T, PipelineError>;

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    /// Reconstruction the decoder will produce.
    pub reconstruction: Mat<f32>,
    /// Model-estimated bits for all latent symbols.
    pub estimated_bits: f64,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub reconstruction: Mat<f32>,
    /// Decoded `y_hat` symbols of each slice, row-major.
    pub slices: Vec<Vec<i32>>,
    pub header: StreamHeader,
}

fn to_symbols(m: &Mat<f32>) -> Vec<i32> {
    m.as_slice()
        .iter()
        .map(|&v| crate::autodiff::round_half_away(v).clamp(-LATENT_LIMIT, LATENT_LIMIT) as i32)
        .collect()
}

fn from_symbols(rows: usize, cols: usize, s: &[i32]) -> Mat<f32> {
    Mat::from_vec(
        rows,
        cols,
        s.iter().map(|&v| (v as f32).clamp(-LATENT_LIMIT, LATENT_LIMIT)).collect(),
    )
}

/// Entropy models and refined latents, shared verbatim by both sides.
///
/// `slice_symbols(i, mu, sigma)` supplies the quantized symbols of slice `i`
/// given its models: the encoder returns what it has, the decoder decodes.
fn latent_pass<F>(
    codec: &Codec<f32>,
    geo: &Geometry,
    g: &mut Graph<'_, f32>,
    z_hat: Var,
    mut slice_symbols: F,
) -> Res<Var>
where
    F: FnMut(usize, &Mat<f32>, &Mat<f32>) -> Res<Vec<i32>>,
{
    let model = &codec.model;
    let rows = geo.latent_len();
    let (mu_h, sigma_h) = model.hyper_synthesis(g, geo, z_hat)?;
    let widths = model.plan.widths();
    if codec.meta.context_enabled {
        let mut refined: Vec<Var> = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let (mu, sigma) = model.slice_params(g, geo, i, &refined, mu_h, sigma_h)?;
            let symbols = slice_symbols(i, g.value(mu), g.value(sigma))?;
            let y_i = g.constant(from_symbols(rows, w, &symbols));
            let bar = model.slice_refine(g, geo, i, &refined, y_i, mu_h)?;
            refined.push(bar);
        }
        Ok(g.concat(&refined)?)
    } else {
        let mu = g.split(mu_h, &widths)?;
        let sigma = g.split(sigma_h, &widths)?;
        let mut parts = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let (m, s) = (g.value(mu[i]).clone(), g.value(sigma[i]).clone());
            let symbols = slice_symbols(i, &m, &s)?;
            parts.push(g.constant(from_symbols(rows, w, &symbols)));
        }
        Ok(g.concat(&parts)?)
    }
}

fn z_models(codec: &Codec<f32>, g: &mut Graph<'_, f32>, rows: usize) -> Res<Vec<coder::DiscretizedGaussianModel>> {
    let (zm, zs) = codec.model.z_prior(g, rows)?;
    Ok(models_from(g.value(zm).as_slice(), g.value(zs).as_slice()))
}

/// Encode the attributes of a voxelized cloud.
pub fn encode_cloud(codec: &Codec<f32>, pc: &PointCloud) -> Res<Encoded> {
    let geo = codec.geometry(pc.coords.clone())?;
    let attrs = Mat::from_fn(pc.len(), 3, |r, c| pc.attrs[r][c] as f32);
    let model = &codec.model;
    let mut g = Graph::with_params(&codec.params);
    let x = g.constant(attrs);
    let y = model.analysis(&mut g, &geo, x)?;
    let z = model.hyper_analysis(&mut g, &geo, y)?;
    let z_sym = to_symbols(g.value(z));
    let hyper = codec.config().hyper_channels;
    let z_hat = g.constant(from_symbols(geo.hyper_len(), hyper, &z_sym));
    let zm = z_models(codec, &mut g, geo.hyper_len())?;
    let mut estimated_bits = coder::estimate_rate(&z_sym, &zm)?;
    let z_bytes = coder::range_encode(&z_sym, &zm)?;

    let y_sym = to_symbols(g.value(y));
    let latent = codec.config().latent_channels;
    let plan = model.plan.clone();
    let mut slice_bytes = Vec::with_capacity(plan.len());
    let refined = latent_pass(codec, &geo, &mut g, z_hat, |i, mu, sigma| {
        let r = &plan.ranges[i];
        let symbols: Vec<i32> = (0..geo.latent_len())
            .flat_map(|row| y_sym[row * latent + r.start..row * latent + r.end].iter().copied())
            .collect();
        let models = models_from(mu.as_slice(), sigma.as_slice());
        estimated_bits += coder::estimate_rate(&symbols, &models)?;
        slice_bytes.push(coder::range_encode(&symbols, &models)?);
        Ok(symbols)
    })?;
    let out = model.synthesis(&mut g, &geo, refined)?;
    let reconstruction = g.value(out).map(clamp_unit);

    let bytes = coder::pack(&Bitstream {
        header: StreamHeader {
            context_enabled: codec.meta.context_enabled,
            config_digest: codec.config().digest(),
            point_count: pc.len() as u32,
            lambda: codec.meta.lambda as f32,
        },
        z: z_bytes,
        slices: slice_bytes,
    })?;
    Ok(Encoded {
        bytes,
        reconstruction,
        estimated_bits,
    })
}

/// Decode attributes for `coords`, which must be the encoder's geometry.
pub fn decode_cloud(codec: &Codec<f32>, bytes: &[u8], coords: Vec<Coord>) -> Res<Decoded> {
    let bs = coder::unpack(bytes)?;
    if bs.header.config_digest != codec.config().digest() {
        return Err(PipelineError::ConfigMismatch);
    }
    if bs.header.context_enabled != codec.meta.context_enabled {
        return Err(PipelineError::ContextMismatch);
    }
    if bs.slices.len() != codec.model.plan.len() {
        return Err(PipelineError::SliceMismatch {
            stream: bs.slices.len(),
            model: codec.model.plan.len(),
        });
    }
    if bs.header.point_count as usize != coords.len() {
        return Err(PipelineError::PointCountMismatch {
            stream: bs.header.point_count as usize,
            geometry: coords.len(),
        });
    }
    let geo = codec.geometry(coords)?;
    let mut g = Graph::with_params(&codec.params);
    // a corrupt payload may drive activations out of range; that is not an error
    g.debug_checks = false;
    let zm = z_models(codec, &mut g, geo.hyper_len())?;
    let z_sym = coder::range_decode(&bs.z, &zm);
    let z_hat = g.constant(from_symbols(geo.hyper_len(), codec.config().hyper_channels, &z_sym));
    let mut slices = Vec::with_capacity(bs.slices.len());
    let refined = latent_pass(codec, &geo, &mut g, z_hat, |i, mu, sigma| {
        let models = models_from(mu.as_slice(), sigma.as_slice());
        let symbols = coder::range_decode(&bs.slices[i], &models);
        slices.push(symbols.clone());
        Ok(symbols)
    })?;
    let out = codec.model.synthesis(&mut g, &geo, refined)?;
    Ok(Decoded {
        reconstruction: g.value(out).map(clamp_unit),
        slices,
        header: bs.header,
    })
}

/// Reconstructed cloud from decoded YUV rows.
pub fn with_attrs(geometry: &PointCloud, yuv: &Mat<f32>) -> PointCloud {
    PointCloud {
        coords: geometry.coords.clone(),
        attrs: (0..yuv.rows())
            .map(|r| {
                let row = yuv.row(r);
                [row[0] as f64, row[1] as f64, row[2] as f64]
            })
            .collect(),
        bit_depth: geometry.bit_depth,
    }
}
