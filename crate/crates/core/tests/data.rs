use std::io::Write;
use std::path::PathBuf;

use frl_core::data::*;
use frl_core::testing::oracles::bilinear_at;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

#[test]
fn idx_round_trip() {
    let bytes = idx_bytes(IMAGES_MAGIC, &[1, 2, 2], &[0, 64, 128, 255]);
    let images = images_from_idx(&bytes).unwrap();
    assert_eq!(images, vec![Image::new(2, 2, 1, vec![0, 64, 128, 255]).unwrap()]);
    assert_eq!(encode_idx_images(&images).unwrap(), bytes);
    let labels = encode_idx_labels(&[3, 1, 4]);
    assert_eq!(labels_from_idx(&labels).unwrap(), vec![3, 1, 4]);
}

#[test]
fn idx_errors() {
    let bad = idx_bytes(0x805, &[1, 2, 2], &[0; 4]);
    assert!(matches!(images_from_idx(&bad), Err(DataError::BadMagic(0x805))));
    let short = idx_bytes(IMAGES_MAGIC, &[2, 2, 2], &[0; 5]);
    assert!(matches!(images_from_idx(&short), Err(DataError::Truncated { expected: 24, got: 21 })));
    let huge = idx_bytes(IMAGES_MAGIC, &[u32::MAX, u32::MAX, u32::MAX], &[]);
    assert!(images_from_idx(&huge).is_err());
    assert!(images_from_idx(&[0, 0]).is_err());
}

#[test]
fn gzipped_idx_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny-idx3-ubyte.gz");
    let mut gz = flate2::write::GzEncoder::new(std::fs::File::create(&path).unwrap(), flate2::Compression::default());
    gz.write_all(&idx_bytes(IMAGES_MAGIC, &[2, 1, 3], &[1, 2, 3, 4, 5, 6])).unwrap();
    gz.finish().unwrap();
    let ds = load_idx(&path).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.resolution(), (1, 3, 1));
    assert_eq!(ds.images()[1].pixels(), &[4, 5, 6]);
}

#[test]
fn shipped_fixtures_load() {
    let train = load_idx(fixture("fmnist-train-5k-images-idx3-ubyte.gz")).unwrap();
    assert_eq!((train.len(), train.resolution()), (5000, (28, 28, 1)));
    let mnist = load_idx(fixture("mnist-test-1k-images-idx3-ubyte.gz")).unwrap();
    assert_eq!((mnist.len(), mnist.resolution()), (1000, (28, 28, 1)));
    let labels = labels_from_idx(&read_maybe_gz(&fixture("fmnist-test-1k-labels-idx1-ubyte.gz")).unwrap()).unwrap();
    assert_eq!(labels.len(), 1000);
    assert!(labels.iter().all(|&l| l < 10));
    // Loading is deterministic.
    assert_eq!(load_idx(fixture("mnist-test-1k-images-idx3-ubyte.gz")).unwrap(), mnist);
}

#[test]
fn ppm_files_and_directories() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("b.ppm"), b"P6\n# comment\n2 1\n255\n\xff\x00\x00\x00\x00\xff").unwrap();
    let a = Image::new(1, 2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
    write_ppm(dir.path().join("a.ppm"), &a).unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let ds = load_ppm_dir(dir.path(), None).unwrap();
    assert_eq!(ds.images()[0], a);
    assert_eq!(ds.images()[1].pixels(), &[255, 0, 0, 0, 0, 255]);

    let gray = Image::new(1, 1, 1, vec![9]).unwrap();
    assert_eq!(decode_ppm(&encode_ppm(&gray)).unwrap().pixels(), &[9, 9, 9]);
    assert!(decode_ppm(b"P6\n2 1\n65535\n").is_err());
    assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_ppm_dir(empty.path(), None), Err(DataError::EmptyDataset)));
    std::fs::write(dir.path().join("c.ppm"), encode_ppm(&Image::filled(2, 2, 3, 0).unwrap())).unwrap();
    assert!(matches!(load_ppm_dir(dir.path(), None), Err(DataError::MixedResolution)));
    assert_eq!(load_ppm_dir(dir.path(), Some((2, 2))).unwrap().resolution(), (2, 2, 3));
}

#[test]
fn resize_contract() {
    let img = Image::new(2, 2, 1, vec![10, 20, 30, 40]).unwrap();
    assert_eq!(resize(&img, 2, 2).unwrap(), img);
    let flat = Image::filled(2, 2, 3, 77).unwrap();
    for (h, w) in [(1, 1), (3, 5), (32, 32)] {
        let r = resize(&flat, h, w).unwrap();
        assert_eq!(r.resolution(), (h, w, 3));
        assert!(r.pixels().iter().all(|&p| p == 77));
    }
    assert!(matches!(resize(&img, 0, 3), Err(DataError::ZeroTarget)));
}

#[test]
fn resize_matches_bilinear_formula() {
    let ramp: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
    for (th, tw) in [(2, 2), (3, 7), (6, 6), (1, 4)] {
        let got = resize_plane(&ramp, 4, 4, 1, th, tw).unwrap();
        for i in 0..th {
            for j in 0..tw {
                assert!((got[i * tw + j] - bilinear_at(&ramp, 4, 4, th, tw, i, j)).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn channel_adaptation() {
    let g = Image::new(28, 28, 1, (0..784).map(|i| (i % 256) as u8).collect()).unwrap();
    let rgb = to_rgb(&g).unwrap();
    assert_eq!(rgb.resolution(), (28, 28, 3));
    assert_eq!(rgb.pixels()[..3], [0, 0, 0]);
    assert_eq!(to_gray(&rgb).unwrap(), g);
    assert!(to_rgb(&rgb).is_err());
    assert!(to_gray(&g).is_err());
}

#[test]
fn synthetic_sets() {
    let c = synth_ood(SynthKind::Constant, 20, (8, 8, 3), 1).unwrap();
    for img in c.images() {
        assert!(img.pixels().iter().all(|&p| p == img.pixels()[0]));
    }
    let a = synth_ood(SynthKind::Noise, 5, (4, 4, 1), 1).unwrap();
    assert_eq!(a, synth_ood(SynthKind::Noise, 5, (4, 4, 1), 1).unwrap());
    assert_ne!(a, synth_ood(SynthKind::Noise, 5, (4, 4, 1), 2).unwrap());
    assert!(synth_ood(SynthKind::Noise, 0, (4, 4, 1), 1).is_err());

    let big = synth_ood(SynthKind::Noise, 1000, (32, 32, 3), 7).unwrap();
    for ch in 0..3 {
        let mean =
            big.images().iter().flat_map(|i| i.pixels().iter().skip(ch).step_by(3)).map(|&p| p as f64).sum::<f64>()
                / (1000.0 * 1024.0);
        assert!((120.0..=135.0).contains(&mean), "{mean}");
    }
}

#[test]
fn manifest_resolution_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"datasets": {
        "mnist": {"kind": "idx", "path": "m.gz", "limit": 3},
        "noise": {"kind": "noise", "count": 4, "resolution": [28, 28, 1], "seed": 5}
    }}"#;
    let m = Manifest::from_json(text, dir.path()).unwrap();
    assert!(matches!(&m.datasets["mnist"], DatasetSource::Idx { path, .. } if path == &dir.path().join("m.gz")));
    assert!(m.validate().is_err());
    assert_eq!(m.dataset("noise").unwrap().len(), 4);
    assert!(matches!(m.dataset("cifar"), Err(DataError::UnknownDataset(_))));
    assert!(Manifest::from_json(r#"{"datasets": {"x": {"kind": "jpeg"}}}"#, dir.path()).is_err());

    let real = Manifest::from_json(
        r#"{"datasets": {"fm": {"kind": "idx", "path": "fmnist-test-1k-images-idx3-ubyte.gz", "limit": 10}}}"#,
        &fixture(""),
    )
    .unwrap();
    real.validate().unwrap();
    let ds = real.dataset("fm").unwrap();
    assert_eq!((ds.name.as_str(), ds.len()), ("fm", 10));
}

proptest! {
    #[test]
    fn resize_stays_in_range(h in 1usize..9, w in 1usize..9, th in 1usize..12, tw in 1usize..12, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..h * w * 3).map(|_| rng.random_range(0.0..=1.0)).collect();
        let out = resize_plane(&v, h, w, 3, th, tw).unwrap();
        let (lo, hi) = v.iter().fold((1.0f64, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(out.iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
    }

    #[test]
    fn gray_rgb_round_trip(pixels in proptest::collection::vec(any::<u8>(), 1..50)) {
        let g = Image::new(1, pixels.len(), 1, pixels).unwrap();
        prop_assert_eq!(to_gray(&to_rgb(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn idx_encode_decode(n in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u8>()) {
        let images: Vec<Image> = (0..n)
            .map(|k| Image::new(h, w, 1, (0..h * w).map(|i| (i as u8).wrapping_mul(seed).wrapping_add(k as u8)).collect()).unwrap())
            .collect();
        prop_assert_eq!(images_from_idx(&encode_idx_images(&images).unwrap()).unwrap(), images);
    }
}
