use std::f64::consts::LN_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    batch_targets, batch_tensor, categorical_loglik, check_batch, per_sample, rng_for, Family, GenerativeModel,
    InputSpec, ModelError, QuantImage,
};
use crate::tensor::{Bound, Conv2d, ConvSpec, Graph, PadMode, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArConfig {
    /// Masked convolutions including the first 5x5 and the 1x1 head.
    pub layers: usize,
    pub filters: usize,
    pub init_seed: u64,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self { layers: 5, filters: 64, init_seed: 0 }
    }
}

/// Causal mask for a `k x k` convolution. Taps above the centre row and left
/// of the centre are open; the centre tap connects input group `a` to output
/// group `b` when `a < b` (`strict`) or `a <= b`.
fn causal_mask(
    k: usize,
    cin: usize,
    cout: usize,
    gin: impl Fn(usize) -> usize,
    gout: impl Fn(usize) -> usize,
    strict: bool,
) -> Tensor<f64> {
    let c = k / 2;
    let mut m = Tensor::zeros([cout, cin, k, k]);
    let data = m.data_mut();
    for o in 0..cout {
        for i in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let open = ky < c
                        || (ky == c && kx < c)
                        || (ky == c && kx == c && if strict { gin(i) < gout(o) } else { gin(i) <= gout(o) });
                    if open {
                        data[((o * cin + i) * k + ky) * k + kx] = 1.0;
                    }
                }
            }
        }
    }
    m
}

/// Raster-scan autoregressive model over masked convolutions.
///
/// Entries are ordered pixel by pixel in raster order and, within a pixel, by
/// channel index, so an augmented input's high-frequency channel is predicted
/// last, conditioned on the image channels. Hidden channels are split into one
/// group per input channel to carry the within-pixel ordering.
#[derive(Clone, Debug)]
pub struct ArModel<T: Real> {
    config: ArConfig,
    spec: InputSpec,
    params: ParamStore<T>,
    convs: Vec<Conv2d<T>>,
}

impl<T: Real> ArModel<T> {
    pub fn new(spec: InputSpec, config: ArConfig) -> Result<Self, ModelError> {
        let g = spec.channels;
        if config.layers < 2 || config.filters < g {
            return Err(ModelError::Architecture(format!(
                "need at least 2 layers and {g} filters, got {} and {}",
                config.layers, config.filters
            )));
        }
        let (f, q) = (config.filters, spec.levels);
        let hidden = move |i: usize| i * g / f;
        let mut rng = rng_for(config.init_seed);
        let mut params = ParamStore::new();
        let mut convs = Vec::with_capacity(config.layers);
        let masked = |k: usize, m: Tensor<f64>| ConvSpec::new(1, k / 2, PadMode::Zero).with_mask(Arc::new(m.cast()));
        let first = causal_mask(5, g, f, |i| i, hidden, true);
        convs.push(Conv2d::new(&mut params, "conv0", g, f, 5, masked(5, first), true, 1.0, &mut rng)?);
        for l in 1..config.layers - 1 {
            let m = causal_mask(3, f, f, hidden, hidden, false);
            convs.push(Conv2d::new(&mut params, &format!("conv{l}"), f, f, 3, masked(3, m), true, 1.0, &mut rng)?);
        }
        let m = causal_mask(1, f, g * q, hidden, |o| o / q, false);
        convs.push(Conv2d::new(&mut params, "head", f, g * q, 1, masked(1, m), true, 0.5, &mut rng)?);
        Ok(Self { config, spec, params, convs })
    }

    pub fn config(&self) -> &ArConfig {
        &self.config
    }

    pub fn input_spec(&self) -> InputSpec {
        self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> ArModel<U> {
        ArModel {
            config: self.config.clone(),
            spec: self.spec,
            params: self.params.cast(),
            convs: self.convs.iter().map(|c| c.cast()).collect(),
        }
    }

    /// Logits `[N, channels * levels, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, batch: &[&QuantImage]) -> Result<Var, ModelError> {
        let top = (self.spec.levels - 1) as f64;
        let mut h = g.constant(batch_tensor(batch, |v| 2.0 * v as f64 / top - 1.0));
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn logits(&self, x: &QuantImage) -> Result<Tensor<T>, ModelError> {
        check_batch(&self.spec, &[x], &[0])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let l = self.forward(&mut g, &p, &[x])?;
        Ok(g.value(l).clone())
    }

    /// Per-sample, per-channel log-likelihood `[N, C]` in nats.
    pub fn loglik(&self, g: &mut Graph<T>, p: &Bound, batch: &[&QuantImage]) -> Result<Var, ModelError> {
        let logits = self.forward(g, p, batch)?;
        Ok(categorical_loglik(g, logits, &self.spec, &batch_targets(batch))?)
    }

    pub fn nll_bits_exact(&self, batch: &[&QuantImage]) -> Result<Vec<f64>, ModelError> {
        check_batch(&self.spec, batch, &vec![0; batch.len()])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let ll = self.loglik(&mut g, &p, batch)?;
        let d = self.spec.dim() as f64;
        Ok(per_sample(g.value(ll)).into_iter().map(|l| -l / (d * LN_2)).collect())
    }

    pub fn nll_loss(&self, g: &mut Graph<T>, p: &Bound, batch: &[&QuantImage]) -> Result<Var, ModelError> {
        let ll = self.loglik(g, p, batch)?;
        let s = g.sum(ll)?;
        let scale = -1.0 / (batch.len() as f64 * self.spec.dim() as f64 * LN_2);
        Ok(g.scale(s, scale)?)
    }
}

impl GenerativeModel for ArModel<f32> {
    fn family(&self) -> Family {
        Family::Ar
    }

    fn spec(&self) -> InputSpec {
        self.spec
    }

    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn loss(&self, g: &mut Graph<f32>, p: &Bound, batch: &[&QuantImage], seeds: &[u64]) -> Result<Var, ModelError> {
        check_batch(&self.spec, batch, seeds)?;
        self.nll_loss(g, p, batch)
    }

    fn nll_bits(&self, batch: &[&QuantImage], seeds: &[u64]) -> Result<Vec<f64>, ModelError> {
        check_batch(&self.spec, batch, seeds)?;
        self.nll_bits_exact(batch)
    }

    fn default_lr(&self) -> f64 {
        5e-4
    }
}
