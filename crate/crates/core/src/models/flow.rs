use std::f64::consts::{LN_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_batch, per_sample, rng_for, Family, GenerativeModel, InputSpec, ModelError, QuantImage};
use crate::tensor::{same_conv, Bound, Conv2d, Graph, ParamStore, Real, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub layers: usize,
    pub filters: usize,
    pub init_seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { layers: 8, filters: 32, init_seed: 0 }
    }
}

#[derive(Clone, Debug)]
struct Coupling<T> {
    /// 1 where the input passes through unchanged and conditions the rest.
    mask: Vec<f64>,
    convs: [Conv2d<T>; 3],
}

/// Stack of affine coupling layers, each followed by a channel reversal.
///
/// Layer `i` keeps the masked half `x_a` and maps the rest as
/// `x_b * exp(s) + t` with `(s, t)` from a small conv net on `x_a` and
/// `s = tanh(.)`. Masks alternate checkerboard and channel halves (only
/// checkerboards for single-channel inputs), flipping parity as they go. The
/// last convolution of every net starts at zero, so a fresh flow is the
/// identity.
#[derive(Clone, Debug)]
pub struct FlowModel<T: Real> {
    config: FlowConfig,
    spec: InputSpec,
    params: ParamStore<T>,
    couplings: Vec<Coupling<T>>,
}

fn mask_for(layer: usize, spec: &InputSpec) -> Vec<f64> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let (checker, parity) = if c == 1 { (true, layer % 2) } else { (layer.is_multiple_of(2), (layer / 2) % 2) };
    let mut m = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let on = if checker { (y + x) % 2 == parity } else { (ch < c.div_ceil(2)) == (parity == 0) };
                m[(ch * h + y) * w + x] = if on { 1.0 } else { 0.0 };
            }
        }
    }
    m
}

impl<T: Real> FlowModel<T> {
    pub fn new(spec: InputSpec, config: FlowConfig) -> Result<Self, ModelError> {
        if config.layers == 0 || config.filters == 0 {
            return Err(ModelError::Architecture("flow needs at least one layer and filter".into()));
        }
        let mut rng = rng_for(config.init_seed);
        let mut params = ParamStore::new();
        let (c, f) = (spec.channels, config.filters);
        let mut couplings = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let name = |j: usize| format!("coupling{i}.conv{j}");
            let a = Conv2d::new(&mut params, &name(0), c, f, 3, same_conv(3), true, 1.0, &mut rng)?;
            let b = Conv2d::new(&mut params, &name(1), f, f, 3, same_conv(3), true, 1.0, &mut rng)?;
            let out = Conv2d::new(&mut params, &name(2), f, 2 * c, 3, same_conv(3), true, 0.0, &mut rng)?;
            couplings.push(Coupling { mask: mask_for(i, &spec), convs: [a, b, out] });
        }
        Ok(Self { config, spec, params, couplings })
    }

    pub fn config(&self) -> &FlowConfig {
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

    pub fn cast<U: Real>(&self) -> FlowModel<U> {
        FlowModel {
            config: self.config.clone(),
            spec: self.spec,
            params: self.params.cast(),
            couplings: self
                .couplings
                .iter()
                .map(|c| Coupling {
                    mask: c.mask.clone(),
                    convs: [c.convs[0].cast(), c.convs[1].cast(), c.convs[2].cast()],
                })
                .collect(),
        }
    }

    /// Re-draws the zero-initialized output convolutions uniformly in
    /// `±scale`, giving a non-trivial flow for tests.
    pub fn randomize_outputs(&mut self, seed: u64, scale: f64) {
        let mut rng = rng_for(seed);
        for c in &self.couplings {
            for id in [Some(c.convs[2].w), c.convs[2].b].into_iter().flatten() {
                self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::of(rng.random_range(-scale..scale)));
            }
        }
    }

    fn mask_tensor(&self, mask: &[f64], n: usize, invert: bool) -> Tensor<T> {
        let d = mask.len();
        let s = self.spec;
        Tensor::from_fn([n, s.channels, s.height, s.width], |i| {
            let m = mask[i % d];
            T::of(if invert { 1.0 - m } else { m })
        })
    }

    /// `(s, t)` of one coupling, both zero on the pass-through half.
    fn scale_shift(&self, g: &mut Graph<T>, p: &Bound, layer: usize, x: Var) -> Result<(Var, Var), TensorError> {
        let cp = &self.couplings[layer];
        let n = g.shape(x)[0];
        let m = g.constant(self.mask_tensor(&cp.mask, n, false));
        let inv = g.constant(self.mask_tensor(&cp.mask, n, true));
        let xa = g.mul(x, m)?;
        let h = cp.convs[0].forward(g, p, xa)?;
        let h = g.relu(h)?;
        let h = cp.convs[1].forward(g, p, h)?;
        let h = g.relu(h)?;
        let h = cp.convs[2].forward(g, p, h)?;
        let c = self.spec.channels;
        let raw = g.slice(h, 1, 0, c)?;
        let t = g.slice(h, 1, c, c)?;
        let s = g.tanh(raw)?;
        let s = g.mul(s, inv)?;
        let t = g.mul(t, inv)?;
        Ok((s, t))
    }

    fn reverse_channels(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let c = self.spec.channels;
        if c == 1 {
            return Ok(x);
        }
        let parts = (0..c).rev().map(|ch| g.slice(x, 1, ch, 1)).collect::<Result<Vec<_>, _>>()?;
        g.concat(&parts, 1)
    }

    /// `z = f(y)` and the per-sample log-determinant `[N]` for `y: [N, C, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, y: Var) -> Result<(Var, Var), TensorError> {
        let n = g.shape(y)[0];
        let d = self.spec.dim();
        let mut x = y;
        let mut logdet: Option<Var> = None;
        for i in 0..self.couplings.len() {
            let (s, t) = self.scale_shift(g, p, i, x)?;
            let e = g.exp(s)?;
            let scaled = g.mul(x, e)?;
            let out = g.add(scaled, t)?;
            x = self.reverse_channels(g, out)?;
            let flat = g.reshape(s, &[n, d])?;
            let ld = g.sum_last(flat)?;
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ld)?,
                None => ld,
            });
        }
        Ok((x, logdet.expect("at least one layer")))
    }

    /// Exact inverse of [`forward`](Self::forward).
    pub fn inverse(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var, TensorError> {
        let mut x = z;
        for i in (0..self.couplings.len()).rev() {
            let y = self.reverse_channels(g, x)?;
            let (s, t) = self.scale_shift(g, p, i, y)?;
            let shifted = g.sub(y, t)?;
            let neg = g.scale(s, -1.0)?;
            let e = g.exp(neg)?;
            x = g.mul(shifted, e)?;
        }
        Ok(x)
    }

    /// Untracked forward pass: `(z, log-det per sample)`.
    pub fn transform(&self, y: &Tensor<T>) -> Result<(Tensor<T>, Vec<f64>), ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let (z, ld) = self.forward(&mut g, &p, yv)?;
        Ok((g.value(z).clone(), g.value(ld).to_f64_vec()))
    }

    pub fn invert(&self, z: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let y = self.inverse(&mut g, &p, zv)?;
        Ok(g.value(y).clone())
    }

    /// `level / Q + U[0, 1/Q)` per entry, NCHW, noise drawn from each sample's seed.
    pub fn dequantize(&self, batch: &[&QuantImage], seeds: &[u64]) -> Result<Tensor<T>, ModelError> {
        check_batch(&self.spec, batch, seeds)?;
        let s = self.spec;
        let q = s.levels as f64;
        let mut data = Vec::with_capacity(batch.len() * s.dim());
        for (x, &seed) in batch.iter().zip(seeds) {
            let mut rng = rng_for(seed);
            let mut chw = vec![0.0; s.dim()];
            for (pix, px) in x.data().chunks_exact(s.channels).enumerate() {
                for (c, &v) in px.iter().enumerate() {
                    chw[c * s.plane() + pix] = v as f64;
                }
            }
            data.extend(chw.into_iter().map(|v| T::of((v + rng.random::<f64>()) / q)));
        }
        Ok(Tensor::new([batch.len(), s.channels, s.height, s.width], data)?)
    }

    /// `-(log N(z; 0, I) + log|det|) / (dim ln 2)` per sample of a continuous batch.
    pub fn density_bits(&self, y: &Tensor<T>) -> Result<Vec<f64>, ModelError> {
        let (z, logdet) = self.transform(y)?;
        let d = self.spec.dim() as f64;
        let sq = per_sample(&Tensor::from_fn(z.shape().to_vec(), |i| z.data()[i] * z.data()[i]));
        Ok(sq
            .iter()
            .zip(&logdet)
            .map(|(s, ld)| {
                let logp = -0.5 * s - 0.5 * d * (2.0 * PI).ln();
                -(logp + ld) / (d * LN_2)
            })
            .collect())
    }

    pub fn nll_loss(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &[&QuantImage],
        seeds: &[u64],
    ) -> Result<Var, ModelError> {
        let n = batch.len() as f64;
        let d = self.spec.dim() as f64;
        let y = g.constant(self.dequantize(batch, seeds)?);
        let (z, logdet) = self.forward(g, p, y)?;
        let sq = g.mul(z, z)?;
        let sq = g.sum(sq)?;
        let ld = g.sum(logdet)?;
        let half = g.scale(sq, 0.5)?;
        let nll = g.sub(half, ld)?;
        let nll = g.add_scalar(nll, 0.5 * n * d * (2.0 * PI).ln())?;
        Ok(g.scale(nll, 1.0 / (n * d * LN_2))?)
    }
}

impl GenerativeModel for FlowModel<f32> {
    fn family(&self) -> Family {
        Family::Flow
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
        self.nll_loss(g, p, batch, seeds)
    }

    fn nll_bits(&self, batch: &[&QuantImage], seeds: &[u64]) -> Result<Vec<f64>, ModelError> {
        check_batch(&self.spec, batch, seeds)?;
        let mut out = Vec::with_capacity(batch.len());
        for (x, s) in batch.iter().zip(seeds) {
            let y = self.dequantize(&[x], &[*s])?;
            out.extend(self.density_bits(&y)?);
        }
        Ok(out)
    }

    fn default_lr(&self) -> f64 {
        5e-4
    }
}
