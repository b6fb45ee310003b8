use frl_core::complexity::png_code_length;
use frl_core::data::{synth_ood, Image, SynthKind};
use frl_core::frequency::{FrequencyConfig, Method};
use frl_core::models::{train, Family, FittedModel, ModelConfig, QuantImage, TrainConfig};
use frl_core::scoring::*;
use frl_core::testing::oracles::{auroc_all_pairs, direct_ssim};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, h: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let base: u8 = rng.random_range(0..200);
            Image::new(h, h, 1, (0..h * h).map(|_| base + rng.random_range(0..40u8)).collect()).unwrap()
        })
        .collect()
}

fn small(family: Family, freq: Option<FrequencyConfig>) -> FittedModel {
    let cfg = ModelConfig {
        family,
        latent_dim: Some(3),
        layers: Some(if family == Family::Vae { 2 } else { 3 }),
        filters: Some(6),
        quant_levels: 32,
        iw_samples: 3,
        init_seed: 1,
    };
    FittedModel::build(&cfg, (8, 8, 1), freq).unwrap()
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[0.0, 1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap(), 1.0);
    assert_eq!(auroc(&[3.0, 4.0, 5.0], &[0.0, 1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(auroc(&[1.0, 2.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(), 0.5);
    assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), auroc_all_pairs(&[1.0, 3.0], &[2.0, 4.0]));
    assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.75);
    assert!(matches!(auroc(&[], &[1.0]), Err(ScoringError::Empty)));
    assert!(matches!(auroc(&[1.0], &[]), Err(ScoringError::Empty)));
    assert!(auroc(&[f64::NAN], &[1.0]).is_err());
}

#[test]
fn auroc_matches_all_pairs_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let (n, m) = (rng.random_range(1..30), rng.random_range(1..30));
        // Few distinct values so ties are common.
        let levels = rng.random_range(2..10);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
        let fast = auroc(&a, &b).unwrap();
        assert!((fast - auroc_all_pairs(&a, &b)).abs() < 1e-12);
        assert_eq!(fast + auroc(&b, &a).unwrap(), 1.0);
    }
}

#[test]
fn threshold_rule() {
    assert_eq!(threshold_classify(&[0.4, 0.6], 0.5), vec![Label::Id, Label::Ood]);
    assert!(threshold_classify(&[1e300, -3.0], f64::INFINITY).iter().all(|&l| l == Label::Id));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let id: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..7.0)).collect();
    let lambda = calibrate_threshold(&id, 0.95).unwrap();
    let kept = threshold_classify(&id, lambda).iter().filter(|&&l| l == Label::Id).count();
    assert!(kept >= 950);
    assert!(calibrate_threshold(&[], 0.95).is_err());
}

#[test]
fn histogram_contract() {
    let h = Histogram::new(&[("id", &[2.0; 7][..])], 10).unwrap();
    let c = h.counts("id").unwrap();
    assert_eq!(c.iter().filter(|&&v| v > 0).count(), 1);
    assert_eq!(c.iter().sum::<u64>(), 7);
    let a = [0.0, 0.1, 0.5, 0.9, 1.0];
    let b = [2.0, 3.0];
    let h = Histogram::new(&[("id", &a[..]), ("ood", &b[..])], 4).unwrap();
    assert_eq!(h.edges.len(), 5);
    assert_eq!((h.edges[0], h.edges[4]), (0.0, 3.0));
    assert_eq!(h.counts("id").unwrap().iter().sum::<u64>(), 5);
    assert_eq!(h.counts("ood").unwrap().iter().sum::<u64>(), 2);
    assert_eq!(overlap(h.counts("id").unwrap(), h.counts("ood").unwrap()), 0.0);
    assert_eq!(overlap(&[1, 2, 3], &[2, 4, 6]), 1.0);
    assert!(matches!(Histogram::new(&[("x", &a[..])], 1), Err(ScoringError::Bins(1))));
}

#[test]
fn throughput_arithmetic() {
    let t = Throughput::from_elapsed(100, 2.0);
    assert_eq!((t.images_per_sec, t.secs_per_image), (50.0, 0.02));
    assert!((t.images_per_sec * t.secs_per_image - 1.0).abs() < 1e-12);
    let mut calls = 0;
    let t = measure_throughput(&[1, 2, 3], |_| -> Result<(), ()> {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 4, "one warm-up call plus the timed loop");
    assert!(t.images_per_sec > 0.0);
}

#[test]
fn recon_identity_and_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let m = recon_metrics(&x, &x, 16, 16, 3).unwrap();
    assert_eq!((m.mse, m.mae, m.psnr), (0.0, 0.0, PSNR_CAP));
    assert!((m.ssim - 1.0).abs() < 1e-12);
    let bin: Vec<f64> = (0..256).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let inv: Vec<f64> = bin.iter().map(|v| 1.0 - v).collect();
    let m = recon_metrics(&bin, &inv, 16, 16, 1).unwrap();
    assert_eq!((m.mse, m.mae, m.psnr), (1.0, 1.0, 0.0));
    assert!(recon_metrics(&bin, &inv[1..], 16, 16, 1).is_err());
    let half: Vec<f64> = x.iter().map(|v| v * 0.5).collect();
    let m = recon_metrics(&x, &half, 16, 16, 3).unwrap();
    assert!((m.psnr - 10.0 * (1.0 / m.mse).log10()).abs() < 1e-12);
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(h, w, c) in &[(16, 16, 1), (16, 16, 3), (12, 20, 1), (11, 11, 2)] {
        let x: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect();
        let got = ssim(&x, &y, h, w, c).unwrap();
        let want = direct_ssim(&x, &y, h, w, c);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!(got < 1.0);
    }
}

#[test]
fn scorer_compatibility() {
    let freq = FrequencyConfig::default();
    let plain = small(Family::Ar, None);
    let aug = small(Family::Ar, Some(freq.clone()));
    let x = &images(1, 8, 0)[0];
    let o = ScoreOptions::default();
    assert!(matches!(score_frl(&plain, x, &freq, 0, &o), Err(ScoringError::FreqModelRequired(Scorer::Frl))));
    assert!(matches!(score_ic(&aug, x, 0, &o), Err(ScoringError::PlainModelRequired(Scorer::Ic))));
    let other = FrequencyConfig::gaussian(3);
    assert!(matches!(score_frl(&aug, x, &other, 0, &o), Err(ScoringError::FreqMismatch { .. })));
    assert!(matches!(score_nll(&aug, x, None, 0, &o), Err(ScoringError::FreqMismatch { .. })));
    assert!(score_nll(&aug, x, Some(&freq), 0, &o).is_ok());
    let big = Image::filled(9, 9, 1, 0).unwrap();
    assert!(matches!(score_nll(&plain, &big, None, 0, &o), Err(ScoringError::Model(_))));
    assert_eq!("FRL".parse::<Scorer>().unwrap(), Scorer::Frl);
    assert!("lr".parse::<Scorer>().is_err());
}

#[test]
fn frl_decomposes_exactly() {
    let freq = FrequencyConfig::with_method(Method::Haar);
    for family in [Family::Vae, Family::Flow, Family::Ar] {
        let m = small(family, Some(freq.clone()));
        let o = ScoreOptions { seed: 9, ..ScoreOptions::default() };
        for (i, x) in images(4, 8, 1).iter().enumerate() {
            let frl = score_frl(&m, x, &freq, i, &o).unwrap();
            let nll = score_nll(&m, x, Some(&freq), i, &o).unwrap();
            let l = png_code_length(x).bits_per_dim;
            assert_eq!(nll.complexity_bpd, 0.0);
            assert_eq!(nll.score, nll.nll_bpd);
            assert_eq!(frl.score - nll.score, -l, "{family:?}");
            assert_eq!(frl.complexity_bpd, l);
            assert_eq!(frl, score_frl(&m, x, &freq, i, &o).unwrap());
            assert_eq!(frl.label, None);
            // Passthrough of the model's own likelihood.
            let q = m.encode(x).unwrap();
            let direct = m.model.as_dyn().nll_bits(&[&q], &[frl_core::models::sample_seed(9, i as u64)]).unwrap()[0];
            assert_eq!(nll.nll_bpd, direct);
        }
    }
}

#[test]
fn ic_is_a_shift_of_nll() {
    let m = small(Family::Flow, None);
    let o = ScoreOptions::default();
    for (i, x) in images(3, 8, 2).iter().enumerate() {
        let nll = score_nll(&m, x, None, i, &o).unwrap();
        let ic = score_ic(&m, x, i, &o).unwrap();
        assert_eq!(ic.score, nll.score - png_code_length(x).bits_per_dim);
    }
    // The alternative denominator divides the code length by dim(x_F).
    let freq = FrequencyConfig::default();
    let f = small(Family::Ar, Some(freq.clone()));
    let x = &images(1, 8, 3)[0];
    let alt = ScoreOptions { complexity_norm: ComplexityNorm::ModelInput, ..ScoreOptions::default() };
    let r = score_frl(&f, x, &freq, 0, &alt).unwrap();
    assert_eq!(r.complexity_bpd, png_code_length(x).code_bits / 128.0);
}

#[test]
fn dataset_scoring_is_batch_and_schedule_invariant() {
    let freq = FrequencyConfig::default();
    let m = small(Family::Vae, Some(freq.clone()));
    let xs = images(12, 8, 4);
    let o = ScoreOptions { seed: 5, ..ScoreOptions::default() };
    let serial = score_dataset(&m, Scorer::Frl, Some(&freq), "toy", &xs, &o).unwrap();
    let par = score_dataset(&m, Scorer::Frl, Some(&freq), "toy", &xs, &ScoreOptions { parallel: true, ..o }).unwrap();
    assert_eq!(serial, par);
    for (i, x) in xs.iter().enumerate() {
        let one = score_frl(&m, x, &freq, i, &o).unwrap();
        assert!((one.score - serial[i].score).abs() < 1e-6);
        assert_eq!(serial[i].sample_id, i);
        assert_eq!(serial[i].dataset, "toy");
    }
    let (timed, t) = timed_score_dataset(&m, Scorer::Frl, Some(&freq), "toy", &xs, &o).unwrap();
    assert_eq!(timed, serial);
    assert!(t.images_per_sec > 0.0);
}

#[test]
fn weight_sweep_identity() {
    let freq = FrequencyConfig::default();
    let m = small(Family::Vae, Some(freq.clone()));
    let xs = images(5, 8, 5);
    let o = ScoreOptions { seed: 2, ..ScoreOptions::default() };
    let sweep = weight_sweep(&m, &xs, &[0.0, 1.0, 2.0], &o).unwrap();
    let frl = score_dataset(&m, Scorer::Frl, Some(&freq), "x", &xs, &o).unwrap();
    for (a, b) in sweep.scores(1).iter().zip(&frl) {
        assert_eq!(*a, b.score);
    }
    assert!(matches!(
        weight_sweep(&small(Family::Ar, Some(freq)), &xs, &[1.0], &o),
        Err(ScoringError::WeightSweepModel)
    ));
    assert!(matches!(weight_sweep(&small(Family::Vae, None), &xs, &[1.0], &o), Err(ScoringError::WeightSweepModel)));
}

#[test]
fn report_structure() {
    let rec = |id: usize, s: f64| ScoreRecord {
        sample_id: id,
        dataset: String::new(),
        label: Some(Label::Id),
        nll_bpd: s,
        complexity_bpd: 0.0,
        score: s,
    };
    let id: Vec<ScoreRecord> = (0..4).map(|i| rec(i, i as f64)).collect();
    let a: Vec<ScoreRecord> = (0..3).map(|i| rec(i, 10.0 + i as f64)).collect();
    let b: Vec<ScoreRecord> = (0..3).map(|i| rec(i, 1.5)).collect();
    let r = EvalReport::new(Scorer::Nll, ("fm", &id), &[("a", &a), ("b", &b)], 5, None).unwrap();
    assert_eq!(r.auroc.len(), 2);
    assert_eq!(r.auroc_for("a"), Some(1.0));
    assert_eq!(r.auroc_for("b"), Some(0.5));
    assert!((r.average_auroc - 0.75).abs() < 1e-12);
    let total: u64 = r.histogram.groups.iter().map(|(_, c)| c.iter().sum::<u64>()).sum();
    assert_eq!(total, 10);
    assert!(EvalReport::new(Scorer::Nll, ("fm", &id), &[], 5, None).is_err());
}

#[test]
fn constant_image_scores_near_zero_under_constant_trained_model() {
    let train_imgs = synth_ood(SynthKind::Constant, 64, (28, 28, 1), 3).unwrap();
    let cfg = ModelConfig {
        family: Family::Ar,
        layers: Some(2),
        filters: Some(8),
        quant_levels: 16,
        ..ModelConfig::default()
    };
    let mut m = FittedModel::build(&cfg, (28, 28, 1), None).unwrap();
    let data: Vec<QuantImage> = train_imgs.images().iter().map(|i| m.encode(i).unwrap()).collect();
    let tc = TrainConfig { epochs: 120, batch_size: 8, lr: Some(1e-2), ..TrainConfig::default() };
    train(m.model.as_dyn_mut(), &data, &tc, |_, _| {}).unwrap();
    let x = Image::filled(28, 28, 1, 77).unwrap();
    let r = score_ic(&m, &x, 0, &ScoreOptions::default()).unwrap();
    // PNG container overhead alone is ~0.9 bits/dim at 28x28.
    assert!(r.nll_bpd < 2.0 && r.complexity_bpd < 1.0, "{r:?}");
    assert!(r.score.abs() < 1.0, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auroc_is_rank_invariant(
        a in proptest::collection::vec(-5i32..5, 1..20),
        b in proptest::collection::vec(-5i32..5, 1..20),
        scale in 0.1f64..10.0,
        shift in -100.0f64..100.0,
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let base = auroc(&a, &b).unwrap();
        let map = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).collect::<Vec<_>>();
        prop_assert_eq!(auroc(&map(&a, &f64::exp), &map(&b, &f64::exp)).unwrap(), base);
        let aff = |x: f64| scale * x + shift;
        prop_assert_eq!(auroc(&map(&a, &aff), &map(&b, &aff)).unwrap(), base);
        prop_assert_eq!(base + auroc(&b, &a).unwrap(), 1.0);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn threshold_extremes(s in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = s.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(threshold_classify(&s, max).iter().all(|&l| l == Label::Id));
        prop_assert!(threshold_classify(&s, min - 1.0).iter().all(|&l| l == Label::Ood));
    }

    #[test]
    fn histogram_conserves_counts(a in proptest::collection::vec(-50f64..50.0, 1..60), bins in 2usize..20) {
        let h = Histogram::new(&[("a", &a[..])], bins).unwrap();
        prop_assert_eq!(h.counts("a").unwrap().iter().sum::<u64>(), a.len() as u64);
        prop_assert_eq!(h.edges.len(), bins + 1);
    }
}
