use frl_core::data::Image;
use frl_core::frequency::*;
use frl_core::testing::oracles::{dense_dft, gaussian_taps, naive_blur};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_plane(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn kernel_matches_direct_formula() {
    let k = gaussian_kernel(3, 0.75).unwrap();
    let mut direct = Vec::new();
    for m in -1i32..=1 {
        for n in -1i32..=1 {
            direct.push((-((m * m + n * n) as f64) / (2.0 * 0.75 * 0.75)).exp());
        }
    }
    let s: f64 = direct.iter().sum();
    for (a, b) in k.iter().zip(&direct) {
        assert!((a - b / s).abs() < 1e-15);
    }
    let centre = k[4];
    assert!(k.iter().all(|&v| v <= centre));
    // Symmetric under both flips and the transpose.
    for m in 0..3 {
        for n in 0..3 {
            assert_eq!(k[m * 3 + n], k[(2 - m) * 3 + n]);
            assert_eq!(k[m * 3 + n], k[m * 3 + 2 - n]);
            assert_eq!(k[m * 3 + n], k[n * 3 + m]);
        }
    }
}

#[test]
fn kernel_errors() {
    assert_eq!(gaussian_kernel(1, 2.0).unwrap(), vec![1.0]);
    assert!(matches!(gaussian_kernel(0, 1.0), Err(FrequencyError::KernelSize(0))));
    assert!(matches!(gaussian_kernel(6, 1.0), Err(FrequencyError::KernelSize(6))));
    assert!(gaussian_kernel(3, -1.0).is_err());
}

#[test]
fn default_config() {
    let c = FrequencyConfig::default();
    assert_eq!(c.method, Method::Gaussian);
    assert_eq!(c.kernel_size, 5);
    assert_eq!(c.sigma(), 1.25);
    assert!(FrequencyConfig { haar_levels: 6, ..FrequencyConfig::with_method(Method::Haar) }.validate(28, 28).is_err());
    assert!(FrequencyConfig { fft_radius: 0.0, ..FrequencyConfig::with_method(Method::Fft) }.validate(8, 8).is_err());
    assert_eq!("haar".parse::<Method>().unwrap(), Method::Haar);
    let json: FrequencyConfig = serde_json::from_str(r#"{"method":"fft","fft_radius":0.25}"#).unwrap();
    assert_eq!(json.method, Method::Fft);
    assert_eq!(json.kernel_size, 5);
}

#[test]
fn blur_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(h, w, k) in &[(8, 8, 5), (7, 5, 3), (12, 9, 7), (3, 4, 5), (2, 2, 9)] {
        let plane = random_plane(&mut rng, h * w);
        let sigma = k as f64 / 4.0;
        let fast = blur(&plane, h, w, &gaussian_kernel(k, sigma).unwrap()).unwrap();
        let slow = naive_blur(&plane, h, w, &gaussian_taps(k, sigma));
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{h}x{w} k={k}: {err}");
    }
}

#[test]
fn blur_stamps_impulse() {
    let (h, w) = (9, 9);
    let mut plane = vec![0.0; h * w];
    plane[4 * w + 4] = 1.0;
    let k = gaussian_kernel(3, 0.8).unwrap();
    let out = blur(&plane, h, w, &k).unwrap();
    for y in 0..h {
        for x in 0..w {
            let expect = if (3..=5).contains(&y) && (3..=5).contains(&x) { k[(y - 3) * 3 + x - 3] } else { 0.0 };
            assert!((out[y * w + x] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn grayscale_coefficients() {
    assert_eq!(rgb2gray(&[1.0, 0.0, 0.0], 3).unwrap(), vec![0.299]);
    assert!((rgb2gray(&[0.3, 0.3, 0.3], 3).unwrap()[0] - 0.3).abs() < 1e-15);
    assert!(rgb2gray(&[0.0; 4], 4).is_err());
    let white = Image::filled(4, 4, 3, 255).unwrap();
    assert!(gray_plane(&white).iter().all(|&v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn constant_images_have_no_high_frequency() {
    for level in [0u8, 37, 128, 255] {
        for c in [1, 3] {
            let img = Image::filled(28, 28, c, level).unwrap();
            for cfg in
                [FrequencyConfig::default(), FrequencyConfig::gaussian(9), FrequencyConfig::with_method(Method::Haar)]
            {
                assert!(high_freq(&img, &cfg).unwrap().values.iter().all(|&v| v == 0.0), "{cfg:?}");
            }
            let haar3 = FrequencyConfig { haar_levels: 3, ..FrequencyConfig::with_method(Method::Haar) };
            assert!(high_freq(&img, &haar3).unwrap().values.iter().all(|&v| v == 0.0));
            let fft = high_freq(&img, &FrequencyConfig::with_method(Method::Fft)).unwrap();
            assert!(fft.values.iter().all(|v| v.abs() < 1e-12));
        }
    }
}

#[test]
fn augment_shapes_and_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let color = random_image(&mut rng, 32, 32, 3);
    let a = augment(&color, &FrequencyConfig::default()).unwrap();
    assert_eq!((a.height, a.width, a.channels), (32, 32, 4));
    let x = color.normalized();
    for c in 0..3 {
        assert!(a.channel(c).zip(x.iter().skip(c).step_by(3)).all(|(u, v)| u == *v));
    }
    let gray = random_image(&mut rng, 28, 28, 1);
    assert_eq!(augment(&gray, &FrequencyConfig::default()).unwrap().channels, 2);
    let flat = augment(&Image::filled(28, 28, 1, 90).unwrap(), &FrequencyConfig::default()).unwrap();
    assert!(flat.channel(1).all(|v| v == 0.5));
}

#[test]
fn residual_quantization() {
    assert_eq!(quantize_residual(-1.0, 256), 0);
    assert_eq!(quantize_residual(1.0, 256), 255);
    assert_eq!(quantize_residual(0.0, 256), 128);
    assert_eq!(quantize_residual(5.0, 256), 255);
    assert_eq!(quantize_residual(0.0, 3), 1);
}

#[test]
fn haar_perfect_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(h, w) in &[(28, 28), (32, 32), (7, 5), (13, 16), (1, 8)] {
        for levels in 1..=max_haar_levels(h, w).max(1) {
            let plane = random_plane(&mut rng, h * w);
            let mut c = plane.clone();
            haar_forward(&mut c, h, w, levels).unwrap();
            haar_inverse(&mut c, h, w, levels).unwrap();
            let err = c.iter().zip(&plane).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "{h}x{w} l={levels}: {err}");
        }
    }
}

#[test]
fn fft_parseval_and_dense_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(h, w, r) in &[(8, 8, 0.0625), (16, 16, 0.5), (6, 10, 0.3), (5, 7, 1.0)] {
        let plane = random_plane(&mut rng, h * w);
        let cfg = FrequencyConfig { fft_radius: r, ..FrequencyConfig::with_method(Method::Fft) };
        let xh = residual(&plane, h, w, &cfg).unwrap();
        let spec = fft_masked_spectrum(&plane, h, w, r).unwrap();
        let spatial: f64 = xh.iter().map(|v| v * v).sum();
        let spectral: f64 = spec.iter().map(|c| c.norm_sqr()).sum();
        assert!((spatial - spectral).abs() < 1e-6, "{spatial} vs {spectral}");

        let dense = dense_dft(&plane, h, w);
        for v in 0..h {
            for u in 0..w {
                let (re, im) = dense[v * w + u];
                let keep = fft_keeps(v, u, h, w, r);
                let want = if keep { (re, im) } else { (0.0, 0.0) };
                let got = spec[v * w + u];
                assert!((got.re - want.0).abs() < 1e-9 && (got.im - want.1).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn fft_checkerboard_matches_dense_mask_inverse() {
    let (h, w) = (16, 16);
    let plane: Vec<f64> = (0..h * w).map(|i| ((i / w + i % w) % 2) as f64).collect();
    let r = 0.5;
    let cfg = FrequencyConfig { fft_radius: r, ..FrequencyConfig::with_method(Method::Fft) };
    let got = residual(&plane, h, w, &cfg).unwrap();
    // Inverse of the masked dense spectrum by direct summation.
    let dense = dense_dft(&plane, h, w);
    let norm = 1.0 / ((h * w) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for v in 0..h {
                for u in 0..w {
                    if fft_keeps(v, u, h, w, r) {
                        let a = 2.0 * std::f64::consts::PI * ((v * y) as f64 / h as f64 + (u * x) as f64 / w as f64);
                        let (re, im) = dense[v * w + u];
                        acc += re * a.cos() - im * a.sin();
                    }
                }
            }
            assert!((got[y * w + x] - acc * norm).abs() < 1e-6);
        }
    }
    // Only the Nyquist corner and the DC survive in a checkerboard; DC is cut.
    assert!((got[0] + 0.5).abs() < 1e-9 && (got[1] - 0.5).abs() < 1e-9);
}

#[test]
fn methods_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_image(&mut rng, 28, 28, 3);
    for m in Method::ALL {
        let cfg = FrequencyConfig::with_method(m);
        assert_eq!(high_freq(&img, &cfg).unwrap(), high_freq(&img, &cfg).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernels_are_normalized(half in 0usize..6, sigma in 0.1f64..5.0) {
        let k = gaussian_kernel(2 * half + 1, sigma).unwrap();
        prop_assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_residual_has_zero_mean(h in 1usize..12, w in 1usize..12, half in 0usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane = random_plane(&mut rng, h * w);
        let xh = residual(&plane, h, w, &FrequencyConfig::gaussian(2 * half + 1)).unwrap();
        prop_assert!((xh.iter().sum::<f64>() / (h * w) as f64).abs() <= 1e-6);
    }

    #[test]
    fn high_freq_is_clamped(seed in any::<u64>(), m in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 8, 8, 1);
        let cfg = FrequencyConfig::with_method(Method::ALL[m]);
        let hf = high_freq(&img, &cfg).unwrap();
        prop_assert!(hf.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        let a = augment(&img, &cfg).unwrap();
        prop_assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn haar_round_trips(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane = random_plane(&mut rng, h * w);
        let levels = max_haar_levels(h, w);
        let mut c = plane.clone();
        haar_forward(&mut c, h, w, levels).unwrap();
        haar_inverse(&mut c, h, w, levels).unwrap();
        prop_assert!(c.iter().zip(&plane).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}
