//! Rate-distortion training: loss, Adam updates, the two-phase fit and checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore};
use crate::network::{read_tensor_file, write_tensor_file, Codec, CodecConfig, Geometry, NetworkError};
use crate::pcio::PointCloud;
use crate::tensor::{Mat, Real};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: rate {bpp} bpp, mse {mse}")]
    NonFinite { step: u64, bpp: f64, mse: f64 },
    #[error("training needs at least one block")]
    NoData,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Res<T> = Result<T, TrainError>;

/// `(rate_y + rate_z) / n + lambda * mean((x - x_tilde)^2)` over all components.
pub fn rd_loss(x: &Mat<f64>, x_tilde: &Mat<f64>, rate_y_bits: f64, rate_z_bits: f64, lambda: f64, n_points: usize) -> f64 {
    assert_eq!(x.shape(), x_tilde.shape());
    let mse = squared_error(x, x_tilde) / x.as_slice().len().max(1) as f64;
    (rate_y_bits + rate_z_bits) / n_points as f64 + lambda * mse
}

fn squared_error<T: Real>(a: &Mat<T>, b: &Mat<T>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&p, &q)| {
            let d = p.to_f64() - q.to_f64();
            d * d
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_update<T: Real>(store: &mut ParamStore<T>, grads: &[(ParamId, Mat<T>)], cfg: &AdamConfig, step: u64) {
    let mut scale = 1.0;
    if let Some(limit) = cfg.clip_norm {
        let norm = grads.iter().map(|(_, g)| g.as_slice().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>()).sum::<f64>().sqrt();
        if norm > limit {
            scale = limit / norm;
        }
    }
    let t = step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads {
        let p = store.get_mut(*id);
        let (value, m, v) = (
            p.value.as_mut_slice(),
            p.m.as_mut_slice(),
            p.v.as_mut_slice(),
        );
        for (((w, mi), vi), &gi) in value.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.as_slice()) {
            let gi = gi.to_f64() * scale;
            let mn = cfg.beta1 * mi.to_f64() + (1.0 - cfg.beta1) * gi;
            let vn = cfg.beta2 * vi.to_f64() + (1.0 - cfg.beta2) * gi * gi;
            *mi = T::from_f64(mn);
            *vi = T::from_f64(vn);
            let update = cfg.learning_rate * (mn / c1) / ((vn / c2).sqrt() + cfg.epsilon);
            *w = T::from_f64(w.to_f64() - update);
        }
    }
}

/// Training block with its geometry prebuilt.
pub struct PreparedBlock {
    pub geometry: Geometry,
    pub attrs: Mat<f32>,
}

impl PreparedBlock {
    pub fn new(codec: &Codec<f32>, pc: &PointCloud) -> Res<Self> {
        Ok(Self {
            geometry: codec.geometry(pc.coords.clone())?,
            attrs: Mat::from_fn(pc.len(), 3, |r, c| pc.attrs[r][c] as f32),
        })
    }

    pub fn point_count(&self) -> usize {
        self.attrs.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
}

/// Owns the parameters being trained and the optimizer clock.
pub struct Trainer {
    pub codec: Codec<f32>,
    pub adam: AdamConfig,
    pub lambda: f64,
    pub step: u64,
}

impl Trainer {
    pub fn new(codec: Codec<f32>, adam: AdamConfig, lambda: f64) -> Self {
        Self {
            codec,
            adam,
            lambda,
            step: 0,
        }
    }

    /// Loss statistics of one block without updating anything.
    pub fn evaluate(&self, block: &PreparedBlock, context: bool) -> Res<StepStats> {
        let mut g = Graph::with_params(&self.codec.params);
        let x = g.constant(block.attrs.clone());
        let out = self.codec.model.forward(&mut g, &block.geometry, x, context)?;
        Ok(self.stats(&g, out.reconstruction, out.bits_y, out.bits_z, &block.attrs))
    }

    fn stats(
        &self,
        g: &Graph<'_, f32>,
        recon: crate::autodiff::Var,
        bits_y: crate::autodiff::Var,
        bits_z: crate::autodiff::Var,
        attrs: &Mat<f32>,
    ) -> StepStats {
        let n = attrs.rows();
        let bpp = (g.scalar(bits_y) + g.scalar(bits_z)) / n as f64;
        let mse = squared_error(g.value(recon), attrs) / (3 * n) as f64;
        StepStats {
            step: self.step,
            loss: bpp + self.lambda * mse,
            bpp,
            mse,
        }
    }

    /// Forward, backward and one Adam update on `block`.
    pub fn train_step(&mut self, block: &PreparedBlock, context: bool) -> Res<StepStats> {
        let n = block.point_count();
        let (stats, grads) = {
            let mut g = Graph::with_params(&self.codec.params);
            let x = g.constant(block.attrs.clone());
            let out = self.codec.model.forward(&mut g, &block.geometry, x, context)?;
            let diff = g.sub(out.reconstruction, x)?;
            let sq = g.mul(diff, diff)?;
            let se = g.sum(sq)?;
            let dist = g.scale(se, self.lambda / (3 * n) as f64)?;
            let bits = g.add(out.bits_y, out.bits_z)?;
            let rate = g.scale(bits, 1.0 / n as f64)?;
            let loss = g.add(rate, dist)?;
            let mut stats = self.stats(&g, out.reconstruction, out.bits_y, out.bits_z, &block.attrs);
            stats.step = self.step + 1;
            if !g.scalar(loss).is_finite() {
                return Err(TrainError::NonFinite {
                    step: self.step + 1,
                    bpp: stats.bpp,
                    mse: stats.mse,
                });
            }
            g.backward(loss)?;
            let grads: Vec<(ParamId, Mat<f32>)> = g.param_grads().into_iter().map(|(id, m)| (id, m.clone())).collect();
            (stats, grads)
        };
        self.step += 1;
        adam_update(&mut self.codec.params, &grads, &self.adam, self.step);
        Ok(stats)
    }

    /// Weights file plus a `.state` sidecar holding the step and Adam moments.
    pub fn save_checkpoint(&self, path: &Path) -> Res<()> {
        self.codec.save(path)?;
        let mut names = Vec::new();
        let mut mats = Vec::new();
        for (_, p) in self.codec.params.iter() {
            names.push(format!("{}.m", p.name));
            mats.push(&p.m);
            names.push(format!("{}.v", p.name));
            mats.push(&p.v);
        }
        // f32 holds 16-bit halves exactly
        let step = Mat::from_vec(1, 2, vec![(self.step >> 16) as f32, (self.step & 0xFFFF) as f32]);
        let mut tensors: Vec<(&str, &Mat<f32>)> = vec![("step", &step)];
        tensors.extend(names.iter().map(String::as_str).zip(mats));
        let mut f = std::io::BufWriter::new(std::fs::File::create(state_path(path))?);
        write_tensor_file(&mut f, self.codec.config(), &self.codec.meta, &tensors)?;
        std::io::Write::flush(&mut f)?;
        Ok(())
    }

    /// Restore weights and, when the sidecar exists, optimizer state.
    pub fn load_checkpoint(path: &Path, adam: AdamConfig, lambda: f64) -> Res<Self> {
        let codec = Codec::<f32>::load(path)?;
        let mut t = Self::new(codec, adam, lambda);
        let sidecar = state_path(path);
        if !sidecar.exists() {
            return Ok(t);
        }
        let mut f = std::io::BufReader::new(std::fs::File::open(&sidecar)?);
        let (_, _, tensors) = read_tensor_file::<f32>(&mut f)?;
        for (name, value) in tensors {
            if name == "step" {
                let s = value.as_slice();
                t.step = ((s[0] as u64) << 16) | s[1] as u64;
                continue;
            }
            let bad = || NetworkError::Weights(format!("unknown state tensor '{name}'"));
            let (base, kind) = name.rsplit_once('.').ok_or_else(bad)?;
            let id = t.codec.params.id(base).ok_or_else(bad)?;
            let p = t.codec.params.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(NetworkError::Weights(format!("state tensor '{name}' has wrong shape")).into());
            }
            match kind {
                "m" => p.m = value,
                "v" => p.v = value,
                _ => return Err(bad().into()),
            }
        }
        Ok(t)
    }
}

pub fn state_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".state");
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub fine_tune_learning_rate: f64,
    /// Steps with the channel context bypassed.
    pub phase1_steps: u64,
    /// Steps with the channel context enabled; zero leaves it disabled.
    pub phase2_steps: u64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub log_every: u64,
    pub codec: CodecConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 16000.0,
            learning_rate: 1e-4,
            fine_tune_learning_rate: 1e-5,
            phase1_steps: 1000,
            phase2_steps: 1000,
            seed: 0,
            clip_norm: None,
            log_every: 100,
            codec: CodecConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Res<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.fine_tune_learning_rate > 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        self.codec.validate()?;
        Ok(())
    }

    pub fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// Result of [`fit`]: final weights and the per-step history.
pub struct FitOutput {
    pub codec: Codec<f32>,
    pub history: Vec<StepStats>,
}

/// Two-phase schedule over `blocks`, one block per step in round-robin order.
///
/// Starts from `start` when given (fine-tuning), otherwise from seeded
/// initial weights. Writes `phase1.weights` and `phase2.weights` checkpoints
/// into `checkpoint_dir` when set. `on_step` sees every step's statistics.
pub fn fit(
    config: &TrainConfig,
    blocks: &[PointCloud],
    start: Option<Trainer>,
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepStats),
) -> Res<FitOutput> {
    config.validate()?;
    if blocks.is_empty() || blocks.iter().any(PointCloud::is_empty) {
        return Err(TrainError::NoData);
    }
    let mut trainer = match start {
        Some(mut t) => {
            if t.codec.config() != &config.codec {
                return Err(TrainError::Config("starting weights use a different codec configuration".into()));
            }
            t.lambda = config.lambda;
            t
        }
        None => Trainer::new(
            Codec::new(&config.codec, config.seed)?,
            config.adam(config.learning_rate),
            config.lambda,
        ),
    };
    let prepared = blocks
        .iter()
        .map(|b| PreparedBlock::new(&trainer.codec, b))
        .collect::<Res<Vec<_>>>()?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut history = Vec::new();
    let phases = [(config.phase1_steps, false, "phase1"), (config.phase2_steps, true, "phase2")];
    let mut cursor = 0usize;
    for (steps, context, name) in phases {
        if steps == 0 {
            continue;
        }
        trainer.codec.meta.context_enabled = context;
        for _ in 0..steps {
            let stats = trainer.train_step(&prepared[cursor % prepared.len()], context)?;
            cursor += 1;
            on_step(&stats);
            history.push(stats);
        }
        trainer.codec.meta.lambda = config.lambda;
        if let Some(dir) = checkpoint_dir {
            trainer.save_checkpoint(&dir.join(format!("{name}.weights")))?;
        }
    }
    trainer.codec.meta.lambda = config.lambda;
    trainer.codec.meta.context_enabled = config.phase2_steps > 0 || trainer.codec.meta.context_enabled;
    Ok(FitOutput {
        codec: trainer.codec,
        history,
    })
}

/// Means of consecutive non-overlapping `window`-step blocks of the loss.
pub fn window_means(history: &[StepStats], window: usize) -> Vec<f64> {
    history
        .chunks_exact(window)
        .map(|c| c.iter().map(|s| s.loss).sum::<f64>() / window as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rd_loss_cases() {
        let x = Mat::from_vec(1, 3, vec![0.1, 0.2, 0.3]);
        assert_eq!(rd_loss(&x, &x, 0.0, 0.0, 1000.0, 1), 0.0);
        // bpp 1.0 and mse 0.001 at lambda 1000
        let shifted = x.map(|v| v + 0.001f64.sqrt());
        let l = rd_loss(&x, &shifted, 800.0, 200.0, 1000.0, 1000);
        assert!((l - 2.0).abs() < 1e-12);
        assert_eq!(rd_loss(&x, &shifted, 800.0, 200.0, 0.0, 1000), 1.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Mat::from_vec(1, 2, vec![1.5, -2.0])).unwrap();
        adam_update(&mut store, &[(id, Mat::zeros(1, 2))], &AdamConfig::default(), 1);
        assert_eq!(store.value(id).as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn state_path_appends_suffix() {
        assert_eq!(state_path(Path::new("a/b.weights")), PathBuf::from("a/b.weights.state"));
    }
}
