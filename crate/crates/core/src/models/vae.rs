use std::f64::consts::{LN_2, PI};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    batch_targets, batch_tensor, categorical_loglik, check_batch, rng_for, Family, GenerativeModel, InputSpec,
    ModelError, QuantImage,
};
use crate::data::Image;
use crate::tensor::kernels::Geometry;
use crate::tensor::{
    Bound, Conv2d, ConvSpec, ConvTranspose2d, ConvTransposeSpec, Graph, Linear, PadMode, ParamStore, Real, Tensor, Var,
};

const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    /// Width of the first encoder convolution; each further layer doubles it.
    pub base_width: usize,
    /// Stride-2 encoder convolutions (mirrored by the decoder).
    pub conv_layers: usize,
    /// Importance samples used by [`GenerativeModel::nll_bits`].
    pub iw_samples: usize,
    pub init_seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { latent_dim: 100, base_width: 32, conv_layers: 4, iw_samples: 20, init_seed: 0 }
    }
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))` in nats.
pub fn kl_diag_gaussian(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - lv - 1.0).sum::<f64>()
}

fn log_normal(z: &[f64]) -> f64 {
    z.iter().map(|v| -0.5 * v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

/// Per-draw ingredients of the importance-weighted bound for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct IwaeTerms {
    /// `log p(x_c | z_k)` per draw `k` and channel `c`, nats.
    pub log_px: Vec<Vec<f64>>,
    pub log_prior: Vec<f64>,
    pub log_posterior: Vec<f64>,
    pub dim: usize,
}

impl IwaeTerms {
    /// `log (1/K) sum_k exp(sum_c w_c log p(x_c|z_k) + log p(z_k) - log q(z_k|x))`.
    pub fn bound(&self, weights: &[f64]) -> f64 {
        let lw: Vec<f64> = (0..self.log_prior.len())
            .map(|k| {
                let rec: f64 = self.log_px[k].iter().zip(weights).map(|(l, w)| w * l).sum();
                rec + self.log_prior[k] - self.log_posterior[k]
            })
            .collect();
        let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + (lw.iter().map(|v| (v - m).exp()).sum::<f64>() / lw.len() as f64).ln()
    }

    pub fn nll_bits(&self, weights: &[f64]) -> f64 {
        -self.bound(weights) / (self.dim as f64 * LN_2)
    }

    /// Weight `w` on the last (high-frequency) channel, one on the others.
    pub fn last_channel_weights(&self, w: f64) -> Vec<f64> {
        let c = self.log_px.first().map_or(0, |r| r.len());
        (0..c).map(|i| if i + 1 == c { w } else { 1.0 }).collect()
    }
}

/// Convolutional VAE with a per-pixel categorical decoder.
///
/// Encoder: `conv_layers` kernel-4 stride-2 convolutions without biases, ReLU,
/// then a linear map to mean and clamped log-variance. Decoder: linear map
/// back to the top feature grid and mirrored transposed convolutions, then a
/// 1x1 convolution to `channels * levels` logits.
#[derive(Clone, Debug)]
pub struct VaeModel<T: Real> {
    config: VaeConfig,
    spec: InputSpec,
    params: ParamStore<T>,
    encoder: Vec<Conv2d<T>>,
    to_latent: Linear,
    from_latent: Linear,
    top: (usize, usize, usize),
    decoder: Vec<ConvTranspose2d>,
    head: Conv2d<T>,
    trained: bool,
}

impl<T: Real> VaeModel<T> {
    pub fn new(spec: InputSpec, config: VaeConfig) -> Result<Self, ModelError> {
        if config.latent_dim == 0 || config.base_width == 0 || config.iw_samples == 0 {
            return Err(ModelError::Architecture("latent_dim, base_width and iw_samples must be positive".into()));
        }
        let mut rng = rng_for(config.init_seed);
        let mut params = ParamStore::new();
        let (mut ch, mut h, mut w) = (spec.channels, spec.height, spec.width);
        let mut sizes = Vec::new();
        let mut encoder = Vec::new();
        for i in 0..config.conv_layers {
            let out = config.base_width << i;
            let (Some(oh), Some(ow)) = (Geometry::output_extent(h, 4, 2, 1), Geometry::output_extent(w, 4, 2, 1))
            else {
                return Err(ModelError::Architecture(format!("{h}x{w} too small for encoder layer {i}")));
            };
            let spec = ConvSpec::new(2, 1, PadMode::Zero);
            encoder.push(Conv2d::new(&mut params, &format!("enc{i}"), ch, out, 4, spec, false, 1.0, &mut rng)?);
            sizes.push((h, w));
            (ch, h, w) = (out, oh, ow);
        }
        let flat = ch * h * w;
        let dz = config.latent_dim;
        let to_latent = Linear::new(&mut params, "to_latent", flat, 2 * dz, true, 0.5, &mut rng)?;
        let top_ch = if config.conv_layers == 0 { config.base_width } else { ch };
        let top = (top_ch, h, w);
        let from_latent = Linear::new(&mut params, "from_latent", dz, top_ch * h * w, true, 1.0, &mut rng)?;
        let mut decoder = Vec::new();
        let (mut dh, mut dw) = (h, w);
        for i in (0..config.conv_layers).rev() {
            let cin = config.base_width << i;
            let cout = config.base_width << i.saturating_sub(1);
            let (th, tw) = sizes[i];
            let op_h = th - ((dh - 1) * 2 + 4 - 2);
            let op_w = tw - ((dw - 1) * 2 + 4 - 2);
            if op_h != op_w || op_h > 1 {
                return Err(ModelError::Architecture(format!("cannot mirror {dh}x{dw} -> {th}x{tw}")));
            }
            let tspec = ConvTransposeSpec { stride: 2, padding: 1, output_padding: op_h };
            decoder.push(ConvTranspose2d::new(&mut params, &format!("dec{i}"), cin, cout, 4, tspec, true, &mut rng)?);
            (dh, dw) = (th, tw);
        }
        let head_spec = ConvSpec::new(1, 0, PadMode::Zero);
        let head = Conv2d::new(
            &mut params,
            "head",
            config.base_width,
            spec.channels * spec.levels,
            1,
            head_spec,
            true,
            0.5,
            &mut rng,
        )?;
        Ok(Self { config, spec, params, encoder, to_latent, from_latent, top, decoder, head, trained: false })
    }

    pub fn config(&self) -> &VaeConfig {
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

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Real>(&self) -> VaeModel<U> {
        VaeModel {
            config: self.config.clone(),
            spec: self.spec,
            params: self.params.cast(),
            encoder: self.encoder.iter().map(|c| c.cast()).collect(),
            to_latent: self.to_latent.clone(),
            from_latent: self.from_latent.clone(),
            top: self.top,
            decoder: self.decoder.clone(),
            head: self.head.cast(),
            trained: self.trained,
        }
    }

    fn input(&self, batch: &[&QuantImage]) -> Tensor<T> {
        let top = (self.spec.levels - 1) as f64;
        batch_tensor(batch, |v| 2.0 * v as f64 / top - 1.0)
    }

    /// `(mu, logvar)`, each `[N, latent_dim]`.
    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var), ModelError> {
        let mut h = x;
        for conv in &self.encoder {
            let y = conv.forward(g, p, h)?;
            h = g.relu(y)?;
        }
        let n = g.shape(h)[0];
        let flat = g.value(h).len() / n;
        let h = g.reshape(h, &[n, flat])?;
        let stats = self.to_latent.forward(g, p, h)?;
        let dz = self.config.latent_dim;
        let mu = g.slice(stats, 1, 0, dz)?;
        let lv = g.slice(stats, 1, dz, dz)?;
        let lv = g.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
        Ok((mu, lv))
    }

    /// Logits `[N, channels * levels, H, W]` for latents `[N, latent_dim]`.
    pub fn decode(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var, ModelError> {
        let n = g.shape(z)[0];
        let h = self.from_latent.forward(g, p, z)?;
        let (c, hh, ww) = self.top;
        let h = g.reshape(h, &[n, c, hh, ww])?;
        let mut h = g.relu(h)?;
        for layer in &self.decoder {
            let y = layer.forward(g, p, h)?;
            h = g.relu(y)?;
        }
        Ok(self.head.forward(g, p, h)?)
    }

    fn draws(&self, k: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed);
        (0..k * self.config.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Posterior statistics `(mu, logvar)` for one input.
    pub fn posterior(&self, x: &QuantImage) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        check_batch(&self.spec, &[x], &[0])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(self.input(&[x]));
        let (mu, lv) = self.encode(&mut g, &p, xv)?;
        Ok((g.value(mu).to_f64_vec(), g.value(lv).to_f64_vec()))
    }

    /// Draws `k` latents from the posterior with `seed` and evaluates every
    /// term of the importance-weighted bound.
    pub fn iwae_terms(&self, x: &QuantImage, k: usize, seed: u64) -> Result<IwaeTerms, ModelError> {
        if k == 0 {
            return Err(ModelError::ZeroSamples);
        }
        let (mu, lv) = self.posterior(x)?;
        let dz = self.config.latent_dim;
        let eps = self.draws(k, seed);
        let mut z = Vec::with_capacity(k * dz);
        let (mut log_prior, mut log_posterior) = (Vec::with_capacity(k), Vec::with_capacity(k));
        for e in eps.chunks_exact(dz) {
            let zk: Vec<f64> = (0..dz).map(|i| T::of(mu[i] + (0.5 * lv[i]).exp() * e[i]).as_f64()).collect();
            // log q(z|x) from the standardized draw.
            let lq = log_normal(e) - 0.5 * lv.iter().sum::<f64>();
            log_prior.push(log_normal(&zk));
            log_posterior.push(lq);
            z.extend(zk);
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(Tensor::from_f64([k, dz], &z)?);
        let logits = self.decode(&mut g, &p, zv)?;
        let reps = vec![x; k];
        let ll = categorical_loglik(&mut g, logits, &self.spec, &batch_targets(&reps))?;
        let c = self.spec.channels;
        let log_px = g.value(ll).data().chunks(c).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
        Ok(IwaeTerms { log_px, log_prior, log_posterior, dim: self.spec.dim() })
    }

    /// Single-draw evidence lower bound estimate, nats. Equals the `K = 1`
    /// importance-weighted bound under the same seed.
    pub fn elbo_estimate(&self, x: &QuantImage, seed: u64) -> Result<f64, ModelError> {
        let t = self.iwae_terms(x, 1, seed)?;
        Ok(t.bound(&vec![1.0; self.spec.channels]))
    }

    /// `-L_K / (dim ln 2)`.
    pub fn iwae_nll_bits(&self, x: &QuantImage, k: usize, seed: u64) -> Result<f64, ModelError> {
        self.channel_weighted_nll_bits(x, k, 1.0, seed)
    }

    /// The bound with the high-frequency (last) channel's reconstruction term
    /// scaled by `w`; still normalized by the full input dimension.
    pub fn channel_weighted_nll_bits(&self, x: &QuantImage, k: usize, w: f64, seed: u64) -> Result<f64, ModelError> {
        Ok(self.channel_weight_sweep(x, k, &[w], seed)?[0])
    }

    /// [`channel_weighted_nll_bits`](Self::channel_weighted_nll_bits) for
    /// several weights from one set of draws.
    pub fn channel_weight_sweep(
        &self,
        x: &QuantImage,
        k: usize,
        ws: &[f64],
        seed: u64,
    ) -> Result<Vec<f64>, ModelError> {
        if let Some(&bad) = ws.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(ModelError::Weight(bad));
        }
        let t = self.iwae_terms(x, k, seed)?;
        Ok(ws.iter().map(|&w| t.nll_bits(&t.last_channel_weights(w))).collect())
    }

    /// Decodes the posterior mean and takes the most likely level per entry,
    /// keeping the first `channels` channels.
    pub fn reconstruct(&self, x: &QuantImage, channels: usize) -> Result<Image, ModelError> {
        if !self.trained {
            return Err(ModelError::Untrained);
        }
        let (mu, _) = self.posterior(x)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(Tensor::from_f64([1, self.config.latent_dim], &mu)?);
        let logits = self.decode(&mut g, &p, zv)?;
        let (q, plane, s) = (self.spec.levels, self.spec.plane(), self.spec);
        let data = g.value(logits).data();
        let mut out = vec![0.0; plane * channels];
        for c in 0..channels.min(s.channels) {
            for i in 0..plane {
                let best = (0..q)
                    .max_by(|&a, &b| data[(c * q + a) * plane + i].partial_cmp(&data[(c * q + b) * plane + i]).unwrap())
                    .unwrap();
                out[i * channels + c] = best as f64 / (q - 1) as f64;
            }
        }
        Image::from_unit(s.height, s.width, channels, &out).map_err(|e| ModelError::Architecture(e.to_string()))
    }

    /// Mean over the batch of `-(E_q log p(x|z) - KL) / (dim ln 2)` with one
    /// reparameterized draw per sample and the closed-form KL.
    pub fn elbo_loss(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &[&QuantImage],
        seeds: &[u64],
    ) -> Result<Var, ModelError> {
        check_batch(&self.spec, batch, seeds)?;
        let n = batch.len();
        let dz = self.config.latent_dim;
        let x = g.constant(self.input(batch));
        let (mu, lv) = self.encode(g, p, x)?;
        let eps: Vec<f64> = seeds.iter().flat_map(|&s| self.draws(1, s)).collect();
        let eps = g.constant(Tensor::from_f64([n, dz], &eps)?);
        let half = g.scale(lv, 0.5)?;
        let sd = g.exp(half)?;
        let noise = g.mul(sd, eps)?;
        let z = g.add(mu, noise)?;
        let logits = self.decode(g, p, z)?;
        let ll = categorical_loglik(g, logits, &self.spec, &batch_targets(batch))?;
        let ll = g.sum(ll)?;
        let mu2 = g.mul(mu, mu)?;
        let var = g.exp(lv)?;
        let kl = g.add(mu2, var)?;
        let kl = g.sub(kl, lv)?;
        let kl = g.add_scalar(kl, -1.0)?;
        let kl = g.sum(kl)?;
        let kl = g.scale(kl, 0.5)?;
        let neg = g.sub(kl, ll)?;
        Ok(g.scale(neg, 1.0 / (n as f64 * self.spec.dim() as f64 * LN_2))?)
    }
}

impl GenerativeModel for VaeModel<f32> {
    fn family(&self) -> Family {
        Family::Vae
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
        self.elbo_loss(g, p, batch, seeds)
    }

    fn nll_bits(&self, batch: &[&QuantImage], seeds: &[u64]) -> Result<Vec<f64>, ModelError> {
        check_batch(&self.spec, batch, seeds)?;
        batch.iter().zip(seeds).map(|(x, &s)| self.iwae_nll_bits(x, self.config.iw_samples, s)).collect()
    }

    fn mark_trained(&mut self) {
        self.trained = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_identities() {
        assert_eq!(kl_diag_gaussian(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(kl_diag_gaussian(&[1.0], &[0.0]), 0.5);
    }

    #[test]
    fn mirrors_28_and_32() {
        for s in [28, 32] {
            let spec = InputSpec::new(s, s, 2, 8).unwrap();
            let cfg = VaeConfig { base_width: 4, latent_dim: 3, ..VaeConfig::default() };
            let m = VaeModel::<f32>::new(spec, cfg).unwrap();
            let x = QuantImage::new(spec, vec![3; spec.dim()]).unwrap();
            let t = m.iwae_terms(&x, 2, 1).unwrap();
            assert_eq!(t.log_px.len(), 2);
            assert!(t.nll_bits(&[1.0, 1.0]).is_finite());
        }
    }
}
