//! Likelihood models over (optionally frequency-augmented) quantized images.
//!
//! Every family reports negative log-likelihood in bits per dimension of its
//! input and is generic over the float type, so the same graphs that train in
//! `f32` can be checked in `f64`.

mod ar;
mod fitted;
mod flow;
mod train;
mod vae;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ar::{ArConfig, ArModel};
pub use fitted::{AnyModel, FittedModel, ModelConfig};
pub use flow::{FlowConfig, FlowModel};
pub use train::{train, TrainConfig, TrainReport};
pub use vae::{kl_diag_gaussian, IwaeTerms, VaeConfig, VaeModel};

use crate::data::Image;
use crate::frequency::{self, FrequencyConfig, FrequencyError};
use crate::tensor::{Bound, Graph, ParamStore, Real, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Frequency(#[from] FrequencyError),
    #[error("input {got:?} does not match model spec {expected:?}")]
    SpecMismatch { expected: InputSpec, got: InputSpec },
    #[error("quantization levels must be in 2..=256, got {0}")]
    Levels(usize),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("importance samples must be at least 1")]
    ZeroSamples,
    #[error("channel weight must be finite and non-negative, got {0}")]
    Weight(f64),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("operation needs a trained model")]
    Untrained,
    #[error("batch of {images} images with {seeds} seeds")]
    SeedCount { images: usize, seeds: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Vae,
    Flow,
    Ar,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Vae => "vae",
            Family::Flow => "flow",
            Family::Ar => "ar",
        }
    }
}

/// Shape and quantization of a model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub levels: usize,
}

impl InputSpec {
    pub fn new(height: usize, width: usize, channels: usize, levels: usize) -> Result<Self, ModelError> {
        if !(2..=256).contains(&levels) {
            return Err(ModelError::Levels(levels));
        }
        if height == 0 || width == 0 || channels == 0 {
            return Err(ModelError::Architecture(format!("empty input {height}x{width}x{channels}")));
        }
        Ok(Self { height, width, channels, levels })
    }

    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Integer levels `0..levels` in HWC order: the image channels, followed by the
/// quantized high-frequency channel for augmented inputs.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QuantImage {
    spec: InputSpec,
    data: Vec<u8>,
}

impl QuantImage {
    pub fn new(spec: InputSpec, data: Vec<u8>) -> Result<Self, ModelError> {
        if data.len() != spec.dim() || data.iter().any(|&v| v as usize >= spec.levels) {
            return Err(ModelError::Architecture(format!("{} values do not fit {spec:?}", data.len())));
        }
        Ok(Self { spec, data })
    }

    /// The image alone, requantized to `levels`.
    pub fn plain(image: &Image, levels: usize) -> Result<Self, ModelError> {
        let (h, w, c) = image.resolution();
        let spec = InputSpec::new(h, w, c, levels)?;
        let data = image.pixels().iter().map(|&p| requantize(p, levels)).collect();
        Ok(Self { spec, data })
    }

    /// The image with its quantized high-frequency channel appended.
    pub fn augmented(image: &Image, cfg: &FrequencyConfig, levels: usize) -> Result<Self, ModelError> {
        let (h, w, c) = image.resolution();
        let spec = InputSpec::new(h, w, c + 1, levels)?;
        let hf = frequency::high_freq(image, cfg)?;
        let mut data = Vec::with_capacity(spec.dim());
        for (px, &r) in image.pixels().chunks_exact(c).zip(&hf.values) {
            data.extend(px.iter().map(|&p| requantize(p, levels)));
            data.push(frequency::quantize_residual(r, levels) as u8);
        }
        Ok(Self { spec, data })
    }

    /// Plain or augmented encoding depending on `freq`.
    pub fn encode(image: &Image, freq: Option<&FrequencyConfig>, levels: usize) -> Result<Self, ModelError> {
        match freq {
            Some(cfg) => Self::augmented(image, cfg, levels),
            None => Self::plain(image, levels),
        }
    }

    pub fn spec(&self) -> InputSpec {
        self.spec
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.spec.width + x) * self.spec.channels + c]
    }
}

fn requantize(p: u8, levels: usize) -> u8 {
    if levels == 256 {
        p
    } else {
        (p as f64 / 255.0 * (levels - 1) as f64).round() as u8
    }
}

/// Derives an independent per-sample seed (SplitMix64 finalizer).
pub fn sample_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn check_batch(spec: &InputSpec, batch: &[&QuantImage], seeds: &[u64]) -> Result<(), ModelError> {
    if batch.len() != seeds.len() {
        return Err(ModelError::SeedCount { images: batch.len(), seeds: seeds.len() });
    }
    for x in batch {
        if x.spec != *spec {
            return Err(ModelError::SpecMismatch { expected: *spec, got: x.spec });
        }
    }
    Ok(())
}

/// NCHW tensor of `f(level)` values.
pub(crate) fn batch_tensor<T: Real>(batch: &[&QuantImage], f: impl Fn(u8) -> f64) -> Tensor<T> {
    let s = batch[0].spec;
    let (c, plane) = (s.channels, s.plane());
    let mut data = vec![T::zero(); batch.len() * s.dim()];
    for (n, x) in batch.iter().enumerate() {
        let out = &mut data[n * s.dim()..][..s.dim()];
        for (p, px) in x.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * plane + p] = T::of(f(v));
            }
        }
    }
    Tensor::new([batch.len(), c, s.height, s.width], data).expect("consistent batch")
}

/// Levels in NCHW order, for gathering categorical log-probabilities.
pub(crate) fn batch_targets(batch: &[&QuantImage]) -> Vec<usize> {
    let s = batch[0].spec;
    let mut idx = vec![0usize; batch.len() * s.dim()];
    for (n, x) in batch.iter().enumerate() {
        for (p, px) in x.data.chunks_exact(s.channels).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                idx[n * s.dim() + ch * s.plane() + p] = v as usize;
            }
        }
    }
    idx
}

/// Per-sample, per-channel log-likelihood (nats) of `targets` under logits laid
/// out `[N, C * Q, H, W]` with channel-major groups of `Q`. Returns `[N, C]`.
pub(crate) fn categorical_loglik<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    spec: &InputSpec,
    targets: &[usize],
) -> Result<Var, TensorError> {
    let n = g.shape(logits)[0];
    let r = g.reshape(logits, &[n, spec.channels, spec.levels, spec.plane()])?;
    let picked = g.pick_log_softmax(r, 2, targets)?;
    g.sum_last(picked)
}

/// Row sums of a `[N, ...]` value as `f64`.
pub(crate) fn per_sample<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    let n = t.shape()[0];
    t.data().chunks(t.len() / n).map(|c| c.iter().map(|v| v.as_f64()).sum()).collect()
}

/// Common surface of the trainable `f32` models.
pub trait GenerativeModel: Send + Sync {
    fn family(&self) -> Family;

    fn spec(&self) -> InputSpec;

    fn params(&self) -> &ParamStore<f32>;

    fn params_mut(&mut self) -> &mut ParamStore<f32>;

    /// Records the mean training loss (bits/dim) of `batch` on `g`.
    fn loss(&self, g: &mut Graph<f32>, p: &Bound, batch: &[&QuantImage], seeds: &[u64]) -> Result<Var, ModelError>;

    /// Per-sample NLL in bits/dim. Each sample's randomness comes only from
    /// its own seed, so results do not depend on batch composition.
    fn nll_bits(&self, batch: &[&QuantImage], seeds: &[u64]) -> Result<Vec<f64>, ModelError>;

    /// Called once training finishes.
    fn mark_trained(&mut self) {}

    /// Learning rate used by [`train`] unless overridden.
    fn default_lr(&self) -> f64 {
        1e-3
    }
}
