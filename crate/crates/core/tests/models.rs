use std::f64::consts::{LN_2, PI};

use frl_core::data::Image;
use frl_core::frequency::FrequencyConfig;
use frl_core::models::*;
use frl_core::tensor::{checkpoint, Graph, Tensor};
use frl_core::testing::oracles::{jacobian, log_quadrature};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_quant(rng: &mut impl Rng, spec: InputSpec) -> QuantImage {
    QuantImage::new(spec, (0..spec.dim()).map(|_| rng.random_range(0..spec.levels) as u8).collect()).unwrap()
}

fn random_flow(spec: InputSpec, layers: usize, seed: u64) -> FlowModel<f64> {
    let mut m = FlowModel::<f32>::new(spec, FlowConfig { layers, filters: 8, init_seed: seed }).unwrap().cast::<f64>();
    m.randomize_outputs(seed + 1, 0.3);
    m
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- flow

#[test]
fn flow_inverts_1000_inputs() {
    let spec = InputSpec::new(4, 4, 2, 256).unwrap();
    let flow = random_flow(spec, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y = Tensor::from_fn([1000, 2, 4, 4], |_| rng.random_range(0.0..1.0));
    let (z, _) = flow.transform(&y).unwrap();
    assert!(max_abs_diff(z.data(), y.data()) > 1e-2, "flow should not be the identity");
    let back = flow.invert(&z).unwrap();
    let err = max_abs_diff(back.data(), y.data());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn flow_logdet_matches_brute_force_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(h, w, c) in &[(2, 2, 1), (2, 2, 2), (4, 4, 1), (2, 2, 4), (1, 3, 3)] {
        let spec = InputSpec::new(h, w, c, 256).unwrap();
        let flow = random_flow(spec, 4, h as u64 * 7 + c as u64);
        for _ in 0..3 {
            let y: Vec<f64> = (0..spec.dim()).map(|_| rng.random_range(0.0..1.0)).collect();
            let f = |v: &[f64]| flow.transform(&Tensor::new([1, c, h, w], v.to_vec()).unwrap()).unwrap().0.into_data();
            let jac = jacobian(f, &y, 1e-5);
            let n = spec.dim();
            let m = DMatrix::from_fn(n, n, |i, j| jac[i][j]);
            let brute = m.determinant().abs().ln();
            let (_, ld) = flow.transform(&Tensor::new([1, c, h, w], y).unwrap()).unwrap();
            assert!((brute - ld[0]).abs() < 1e-5, "{h}x{w}x{c}: {brute} vs {}", ld[0]);
        }
    }
}

#[test]
fn inverse_logdet_is_negated() {
    let spec = InputSpec::new(2, 2, 2, 256).unwrap();
    let flow = random_flow(spec, 4, 1);
    let y = Tensor::from_fn([1, 2, 2, 2], |i| 0.1 * i as f64);
    let (z, ld) = flow.transform(&y).unwrap();
    let inv = |v: &[f64]| flow.invert(&Tensor::new([1, 2, 2, 2], v.to_vec()).unwrap()).unwrap().into_data();
    let jac = jacobian(inv, z.data(), 1e-5);
    let back = DMatrix::from_fn(8, 8, |i, j| jac[i][j]).determinant().abs().ln();
    assert!((back + ld[0]).abs() < 1e-5);
}

#[test]
fn fresh_flow_is_identity() {
    let spec = InputSpec::new(3, 3, 2, 16).unwrap();
    let flow = FlowModel::<f32>::new(spec, FlowConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_quant(&mut rng, spec);
    let y = flow.dequantize(&[&x], &[5]).unwrap();
    let (z, ld) = flow.transform(&y).unwrap();
    assert_eq!(ld, vec![0.0]);
    // Channel reversals cancel over the default even number of layers.
    assert_eq!(z.data(), y.data());
    let d = spec.dim() as f64;
    let sq: f64 = y.data().iter().map(|&v| (v as f64).powi(2)).sum();
    let expect = (0.5 * sq + 0.5 * d * (2.0 * PI).ln()) / (d * LN_2);
    let got = flow.nll_bits(&[&x], &[5]).unwrap()[0];
    assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
    assert!(y.data().iter().all(|&v| (0.0..1.0).contains(&v)));
}

// ---------------------------------------------------------------- autoregressive

fn all_images(spec: InputSpec) -> Vec<QuantImage> {
    let n = spec.dim();
    let q = spec.levels;
    (0..q.pow(n as u32))
        .map(|mut code| {
            let data = (0..n)
                .map(|_| {
                    let v = code % q;
                    code /= q;
                    v as u8
                })
                .collect();
            QuantImage::new(spec, data).unwrap()
        })
        .collect()
}

#[test]
fn ar_normalizes_exhaustively() {
    for &(h, w, c) in &[(1, 2, 1), (2, 2, 1), (1, 2, 2), (1, 1, 1)] {
        for q in [3, 4] {
            let spec = InputSpec::new(h, w, c, q).unwrap();
            let cfg = ArConfig { layers: 3, filters: 8, init_seed: (h * 10 + w + q) as u64 };
            let m = ArModel::<f32>::new(spec, cfg).unwrap().cast::<f64>();
            let images = all_images(spec);
            let refs: Vec<&QuantImage> = images.iter().collect();
            let bits = m.nll_bits_exact(&refs).unwrap();
            let d = spec.dim() as f64;
            let total: f64 = bits.iter().map(|b| (-b * d * LN_2).exp()).sum();
            assert!((total - 1.0).abs() < 1e-6, "{h}x{w}x{c} q={q}: {total}");
        }
    }
}

#[test]
fn ar_single_pixel_uses_unconditional_head() {
    let spec = InputSpec::new(1, 1, 1, 4).unwrap();
    let m = ArModel::<f32>::new(spec, ArConfig { layers: 2, filters: 4, init_seed: 2 }).unwrap().cast::<f64>();
    let x = QuantImage::new(spec, vec![2]).unwrap();
    let logits = m.logits(&x).unwrap().into_data();
    let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
    let expect = -(logits[2] - lse) / LN_2;
    assert!((m.nll_bits_exact(&[&x]).unwrap()[0] - expect).abs() < 1e-12);
    // With an empty context the logits cannot depend on the value itself.
    let y = QuantImage::new(spec, vec![0]).unwrap();
    assert_eq!(m.logits(&y).unwrap().into_data(), logits);
}

#[test]
fn ar_is_causal_under_500_perturbations() {
    let spec = InputSpec::new(5, 4, 2, 8).unwrap();
    let m = ArModel::<f32>::new(spec, ArConfig { layers: 4, filters: 8, init_seed: 1 }).unwrap();
    let (c, q, plane) = (spec.channels, spec.levels, spec.plane());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let x = random_quant(&mut rng, spec);
        let j = rng.random_range(0..spec.dim());
        let mut data = x.data().to_vec();
        data[j] = ((data[j] as usize + rng.random_range(1..q)) % q) as u8;
        let y = QuantImage::new(spec, data).unwrap();
        let (lx, ly) = (m.logits(&x).unwrap(), m.logits(&y).unwrap());
        // HWC index j is ordering position j: raster pixels, channels within.
        for pos in 0..=j {
            let (pix, ch) = (pos / c, pos % c);
            for v in 0..q {
                let k = (ch * q + v) * plane + pix;
                assert_eq!(lx.data()[k].to_bits(), ly.data()[k].to_bits(), "perturbing {j} changed {pos}");
            }
        }
    }
}

// ---------------------------------------------------------------- VAE

fn tiny_vae(spec: InputSpec, seed: u64) -> VaeModel<f32> {
    let layers = if spec.height >= 4 { 1 } else { 0 };
    VaeModel::new(
        spec,
        VaeConfig { latent_dim: 2, base_width: 4, conv_layers: layers, iw_samples: 20, init_seed: seed },
    )
    .unwrap()
}

#[test]
fn kl_closed_form() {
    assert_eq!(kl_diag_gaussian(&[0.0; 5], &[0.0; 5]), 0.0);
    assert_eq!(kl_diag_gaussian(&[1.0], &[0.0]), 0.5);
    let (m, lv) = (0.3f64, -0.7f64);
    let direct = 0.5 * (m * m + lv.exp() - 1.0 - lv);
    assert!((kl_diag_gaussian(&[m], &[lv]) - direct).abs() < 1e-15);
}

#[test]
fn iwae_means_tighten_with_k() {
    let spec = InputSpec::new(4, 4, 2, 4).unwrap();
    let m = tiny_vae(spec, 5);
    let x = random_quant(&mut ChaCha8Rng::seed_from_u64(2), spec);
    let mean = |k: usize| (0..500u64).map(|s| m.iwae_nll_bits(&x, k, s).unwrap()).sum::<f64>() / 500.0;
    let (b1, b5, b20) = (mean(1), mean(5), mean(20));
    // NLL is the negated bound: tighter bounds give smaller NLL.
    assert!(b5 <= b1 + 0.01 && b20 <= b5 + 0.01, "{b1} {b5} {b20}");
    let elbo = (0..200u64).map(|s| -m.elbo_estimate(&x, s).unwrap() / (spec.dim() as f64 * LN_2)).sum::<f64>() / 200.0;
    let k50 = (0..200u64).map(|s| m.iwae_nll_bits(&x, 50, s).unwrap()).sum::<f64>() / 200.0;
    assert!(k50 <= elbo + 0.01, "{k50} vs {elbo}");
}

#[test]
fn k1_bound_is_the_elbo_estimate() {
    let spec = InputSpec::new(4, 4, 1, 4).unwrap();
    let m = tiny_vae(spec, 1);
    let x = random_quant(&mut ChaCha8Rng::seed_from_u64(3), spec);
    for s in 0..5 {
        let elbo = m.elbo_estimate(&x, s).unwrap();
        assert_eq!(m.iwae_nll_bits(&x, 1, s).unwrap(), -elbo / (spec.dim() as f64 * LN_2));
    }
    assert!(matches!(m.iwae_nll_bits(&x, 0, 0), Err(ModelError::ZeroSamples)));
}

#[test]
fn one_pixel_model_matches_quadrature() {
    let spec = InputSpec::new(1, 1, 1, 4).unwrap();
    let cfg = VaeConfig { latent_dim: 1, base_width: 3, conv_layers: 0, iw_samples: 2000, init_seed: 7 };
    let mut m = VaeModel::<f32>::new(spec, cfg).unwrap().cast::<f64>();
    // Fixed small encoder weights keep q(z|x) broad, so the importance
    // sampler covers the posterior mass.
    for name in ["to_latent.weight", "to_latent.bias"] {
        let id = m.store().id(name).unwrap();
        m.store_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 0.1);
    }
    let p = m.store();
    for level in 0..4u8 {
        let x = QuantImage::new(spec, vec![level]).unwrap();
        // log p(x) = log ∫ softmax(decode(z))[x] N(z; 0, 1) dz.
        let n = 4000;
        let (lo, hi) = (-12.0, 12.0);
        let zs: Vec<f64> = (0..=2 * n).map(|i| lo + i as f64 * (hi - lo) / (2 * n) as f64).collect();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let zv = g.constant(Tensor::new([zs.len(), 1], zs.clone()).unwrap());
        let logits = m.decode(&mut g, &bound, zv).unwrap();
        let l = g.value(logits).data().to_vec();
        let log_px: Vec<f64> =
            l.chunks(4).map(|r| r[level as usize] - r.iter().map(|v| v.exp()).sum::<f64>().ln()).collect();
        let log_f = |t: f64| {
            let i = ((t - lo) / (hi - lo) * (2 * n) as f64).round() as usize;
            log_px[i] - 0.5 * t * t - 0.5 * (2.0 * PI).ln()
        };
        let exact_bits = -log_quadrature(log_f, lo, hi, n) / LN_2;
        let iw = (0..5u64).map(|s| m.iwae_nll_bits(&x, 2000, s).unwrap()).sum::<f64>() / 5.0;
        assert!((iw - exact_bits).abs() < 0.02, "level {level}: {iw} vs {exact_bits}");
    }
}

#[test]
fn channel_weights() {
    let spec = InputSpec::new(4, 4, 2, 4).unwrap();
    let m = tiny_vae(spec, 8);
    let x = random_quant(&mut ChaCha8Rng::seed_from_u64(4), spec);
    assert_eq!(m.channel_weighted_nll_bits(&x, 7, 1.0, 3).unwrap(), m.iwae_nll_bits(&x, 7, 3).unwrap());
    let t = m.iwae_terms(&x, 7, 3).unwrap();
    // w = 0 drops the high-frequency reconstruction term only.
    let lw: Vec<f64> = (0..7).map(|k| t.log_px[k][0] + t.log_prior[k] - t.log_posterior[k]).collect();
    let top = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bound = top + (lw.iter().map(|v| (v - top).exp()).sum::<f64>() / 7.0).ln();
    let w0 = m.channel_weighted_nll_bits(&x, 7, 0.0, 3).unwrap();
    assert!((w0 + bound / (spec.dim() as f64 * LN_2)).abs() < 1e-12);
    let sweep = m.channel_weight_sweep(&x, 7, &[0.0, 0.5, 1.0, 1.5, 2.0], 3).unwrap();
    assert_eq!(sweep.len(), 5);
    assert!(sweep.iter().all(|v| v.is_finite()));
    assert_eq!(sweep[2], m.iwae_nll_bits(&x, 7, 3).unwrap());
    assert!(matches!(m.channel_weighted_nll_bits(&x, 7, -1.0, 3), Err(ModelError::Weight(_))));
}

#[test]
fn logvar_is_clamped() {
    let spec = InputSpec::new(4, 4, 1, 4).unwrap();
    let mut m = tiny_vae(spec, 2);
    let id = m.store().id("to_latent.bias").unwrap();
    m.store_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 50.0);
    let (_, lv) = m.posterior(&random_quant(&mut ChaCha8Rng::seed_from_u64(1), spec)).unwrap();
    assert!(lv.iter().all(|&v| v == 10.0));
}

// ---------------------------------------------------------------- shared

#[test]
fn nll_is_batch_invariant() {
    let spec = InputSpec::new(8, 8, 2, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs: Vec<QuantImage> = (0..5).map(|_| random_quant(&mut rng, spec)).collect();
    let refs: Vec<&QuantImage> = xs.iter().collect();
    let seeds: Vec<u64> = (0..5).map(|i| sample_seed(3, i)).collect();
    let mut flow = FlowModel::<f32>::new(spec, FlowConfig { layers: 4, filters: 8, init_seed: 0 }).unwrap();
    flow.randomize_outputs(1, 0.2);
    let models: Vec<Box<dyn GenerativeModel>> = vec![
        Box::new(
            VaeModel::<f32>::new(
                spec,
                VaeConfig { latent_dim: 3, base_width: 4, conv_layers: 2, iw_samples: 4, init_seed: 0 },
            )
            .unwrap(),
        ),
        Box::new(flow),
        Box::new(ArModel::<f32>::new(spec, ArConfig { layers: 3, filters: 8, init_seed: 0 }).unwrap()),
    ];
    for m in &models {
        let batch = m.nll_bits(&refs, &seeds).unwrap();
        for i in 0..5 {
            let alone = m.nll_bits(&[refs[i]], &[seeds[i]]).unwrap()[0];
            assert!((alone - batch[i]).abs() < 1e-6, "{:?}: {alone} vs {}", m.family(), batch[i]);
            assert!(alone.is_finite());
        }
        let rev: Vec<&QuantImage> = refs.iter().rev().copied().collect();
        let rs: Vec<u64> = seeds.iter().rev().copied().collect();
        let again = m.nll_bits(&rev, &rs).unwrap();
        assert!(again.iter().rev().zip(&batch).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(matches!(m.nll_bits(&refs, &seeds[..2]), Err(ModelError::SeedCount { .. })));
    }
}

#[test]
fn spec_mismatch_is_rejected() {
    let spec = InputSpec::new(4, 4, 1, 4).unwrap();
    let other = InputSpec::new(4, 4, 1, 8).unwrap();
    let m = ArModel::<f32>::new(spec, ArConfig { layers: 2, filters: 4, init_seed: 0 }).unwrap();
    let x = QuantImage::new(other, vec![0; 16]).unwrap();
    assert!(matches!(m.nll_bits(&[&x], &[0]), Err(ModelError::SpecMismatch { .. })));
    assert!(QuantImage::new(spec, vec![4; 16]).is_err());
    assert!(InputSpec::new(4, 4, 1, 1).is_err());
}

#[test]
fn quantized_encodings() {
    let img = Image::new(1, 2, 1, vec![0, 255]).unwrap();
    assert_eq!(QuantImage::plain(&img, 256).unwrap().data(), &[0, 255]);
    assert_eq!(QuantImage::plain(&img, 4).unwrap().data(), &[0, 3]);
    let flat = Image::filled(8, 8, 1, 40).unwrap();
    let aug = QuantImage::augmented(&flat, &FrequencyConfig::default(), 256).unwrap();
    assert_eq!(aug.spec().channels, 2);
    assert!(aug.data().chunks(2).all(|p| p == [40, 128]));
}

fn toy_images(n: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let base: u8 = rng.random_range(20..230);
            Image::new(8, 8, 1, (0..64).map(|_| base.saturating_add(rng.random_range(0..12))).collect()).unwrap()
        })
        .collect()
}

fn toy_vae(levels: usize) -> VaeModel<f32> {
    let spec = InputSpec::new(8, 8, 1, levels).unwrap();
    VaeModel::new(spec, VaeConfig { latent_dim: 4, base_width: 8, conv_layers: 2, iw_samples: 4, init_seed: 1 })
        .unwrap()
}

#[test]
fn training_bookkeeping_and_determinism() {
    let data: Vec<QuantImage> = toy_images(200, 1).iter().map(|i| QuantImage::plain(i, 256).unwrap()).collect();
    let cfg = TrainConfig { epochs: 2, batch_size: 32, seed: 4, ..TrainConfig::default() };
    let mut seen = Vec::new();
    let mut a = toy_vae(256);
    let report = train(&mut a, &data, &cfg, |e, l| seen.push((e, l))).unwrap();
    assert_eq!(report.loss_curve.len(), 2);
    assert!(report.loss_curve[1].is_finite());
    assert_eq!(report.steps, 14);
    assert_eq!(seen.len(), 2);
    assert!(a.is_trained());
    let mut b = toy_vae(256);
    train(&mut b, &data, &cfg, |_, _| {}).unwrap();
    assert_eq!(checkpoint::to_bytes(a.store()), checkpoint::to_bytes(b.store()));
    assert!(matches!(train(&mut b, &[], &cfg, |_, _| {}), Err(ModelError::EmptyDataset)));
}

#[test]
fn training_progress_and_reconstruction() {
    let images = toy_images(600, 2);
    let data: Vec<QuantImage> = images[..500].iter().map(|i| QuantImage::plain(i, 16).unwrap()).collect();
    let mut m = toy_vae(16);
    let x0 = &data[0];
    assert!(matches!(m.reconstruct(x0, 1), Err(ModelError::Untrained)));
    let cfg = TrainConfig { epochs: 20, batch_size: 32, lr: Some(3e-3), seed: 1, ..TrainConfig::default() };
    let report = train(&mut m, &data, &cfg, |_, _| {}).unwrap();
    assert!(report.loss_curve[19] < report.loss_curve[0], "{:?}", report.loss_curve);

    let mean: Vec<f64> =
        (0..64).map(|p| images[..500].iter().map(|i| i.normalized()[p]).sum::<f64>() / 500.0).collect();
    let (mut recon, mut base) = (0.0, 0.0);
    for img in &images[500..] {
        let x = QuantImage::plain(img, 16).unwrap();
        let r = m.reconstruct(&x, 1).unwrap();
        assert_eq!(r.resolution(), (8, 8, 1));
        assert_eq!(r, m.reconstruct(&x, 1).unwrap());
        let v = img.normalized();
        recon += v.iter().zip(r.normalized()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        base += v.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    assert!(recon < base, "{recon} vs {base}");
}
