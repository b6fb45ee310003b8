use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Image};

/// Reference images of increasing compressibility-cost, shared by the
/// complexity tests and the `fixtures` command: `blank`, `digit` (an
/// anti-aliased ring), `low_noise` (mid-gray with +-4 jitter) and `noise`.
pub fn fixture_images(
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<(&'static str, Image)>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width * channels;
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let radius = height.min(width) as f64 * 0.3;
    let stroke = (height.min(width) as f64 * 0.08).max(1.0);
    let ring: Vec<u8> = (0..height * width)
        .flat_map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            let d = (((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - radius).abs();
            let v = (255.0 * (1.0 - (d - stroke).max(0.0))).clamp(0.0, 255.0).round() as u8;
            std::iter::repeat_n(v, channels)
        })
        .collect();
    let low: Vec<u8> = (0..n).map(|_| 124 + rng.random_range(0..=8u8)).collect();
    let noise: Vec<u8> = (0..n).map(|_| rng.random()).collect();
    Ok(vec![
        ("blank", Image::filled(height, width, channels, 0)?),
        ("digit", Image::new(height, width, channels, ring)?),
        ("low_noise", Image::new(height, width, channels, low)?),
        ("noise", Image::new(height, width, channels, noise)?),
    ])
}
