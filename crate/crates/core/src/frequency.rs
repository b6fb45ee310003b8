//! High-frequency extraction and the frequency-augmented model input.
//!
//! The three extractors all work on the grayscale view of an image and return
//! a signed residual clamped to `[-1, 1]`:
//!
//! * `gaussian` — image minus its Gaussian blur (reflect padding),
//! * `fft` — inverse orthonormal DFT with low radial frequencies removed,
//! * `haar` — inverse multi-level Haar transform with the final approximation band removed.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::tensor::PadMode;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum FrequencyError {
    #[error("kernel size must be odd and positive, got {0}")]
    KernelSize(usize),
    #[error("sigma must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("fft radius must lie in (0, 1], got {0}")]
    Radius(f64),
    #[error("haar levels must be in 1..={max} for this image, got {levels}")]
    Levels { levels: usize, max: usize },
    #[error("expected {expected} channel(s), got {got}")]
    Channels { expected: usize, got: usize },
    #[error("plane of {got} values does not match {height}x{width}")]
    PlaneSize { height: usize, width: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Gaussian,
    Fft,
    Haar,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Gaussian, Method::Fft, Method::Haar];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gaussian => "gaussian",
            Method::Fft => "fft",
            Method::Haar => "haar",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown frequency method {s:?}"))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyConfig {
    pub method: Method,
    pub kernel_size: usize,
    /// Gaussian standard deviation; `None` applies the `k / 4` rule.
    pub sigma: Option<f64>,
    /// Cutoff as a fraction of the Nyquist frequency.
    pub fft_radius: f64,
    pub haar_levels: usize,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        Self { method: Method::Gaussian, kernel_size: 5, sigma: None, fft_radius: 0.0625, haar_levels: 1 }
    }
}

impl FrequencyConfig {
    pub fn gaussian(kernel_size: usize) -> Self {
        Self { kernel_size, ..Self::default() }
    }

    pub fn with_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(self.kernel_size as f64 / 4.0)
    }

    /// Checks the parameters of the selected method against an image size.
    pub fn validate(&self, height: usize, width: usize) -> Result<(), FrequencyError> {
        match self.method {
            Method::Gaussian => {
                if self.kernel_size.is_multiple_of(2) {
                    return Err(FrequencyError::KernelSize(self.kernel_size));
                }
                let s = self.sigma();
                if !(s > 0.0 && s.is_finite()) {
                    return Err(FrequencyError::Sigma(s));
                }
            }
            Method::Fft => {
                if !(self.fft_radius > 0.0 && self.fft_radius <= 1.0) {
                    return Err(FrequencyError::Radius(self.fft_radius));
                }
            }
            Method::Haar => {
                let max = max_haar_levels(height, width);
                if self.haar_levels == 0 || self.haar_levels > max {
                    return Err(FrequencyError::Levels { levels: self.haar_levels, max });
                }
            }
        }
        Ok(())
    }
}

/// `floor(log2(min(h, w)))`.
pub fn max_haar_levels(height: usize, width: usize) -> usize {
    height.min(width).max(1).ilog2() as usize
}

/// Normalized `k x k` Gaussian, row-major.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Vec<f64>, FrequencyError> {
    if k.is_multiple_of(2) {
        return Err(FrequencyError::KernelSize(k));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FrequencyError::Sigma(sigma));
    }
    let r = (k / 2) as isize;
    let two_s2 = 2.0 * sigma * sigma;
    let mut w: Vec<f64> =
        (-r..=r).flat_map(|m| (-r..=r).map(move |n| (-((m * m + n * n) as f64) / two_s2).exp())).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

fn check_plane(plane: &[f64], height: usize, width: usize) -> Result<(), FrequencyError> {
    if plane.len() != height * width || plane.is_empty() {
        return Err(FrequencyError::PlaneSize { height, width, got: plane.len() });
    }
    Ok(())
}

/// Convolves a single-channel plane with a normalized square kernel using
/// reflect padding.
///
/// Evaluated as `x[p] - sum_i k_i (x[p] - x[p + i])`, which equals the plain
/// weighted sum for a normalized kernel but keeps flat regions exactly flat.
pub fn blur(plane: &[f64], height: usize, width: usize, kernel: &[f64]) -> Result<Vec<f64>, FrequencyError> {
    check_plane(plane, height, width)?;
    let k = (kernel.len() as f64).sqrt() as usize;
    if k * k != kernel.len() || k.is_multiple_of(2) {
        return Err(FrequencyError::KernelSize(k));
    }
    let r = (k / 2) as isize;
    let mode = PadMode::Reflect;
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let centre = plane[y * width + x];
            let mut acc = 0.0;
            for m in -r..=r {
                let sy = mode.source(y as isize + m, height).unwrap();
                let row = &kernel[((m + r) as usize) * k..][..k];
                for (n, &kv) in (-r..=r).zip(row) {
                    let sx = mode.source(x as isize + n, width).unwrap();
                    acc += kv * (centre - plane[sy * width + sx]);
                }
            }
            out[y * width + x] = centre - acc;
        }
    }
    Ok(out)
}

/// BT.601 luma of an HWC plane with three channels.
pub fn rgb2gray(values: &[f64], channels: usize) -> Result<Vec<f64>, FrequencyError> {
    if channels != 3 {
        return Err(FrequencyError::Channels { expected: 3, got: channels });
    }
    Ok(values.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect())
}

/// Normalized grayscale view of an image.
pub fn gray_plane(image: &Image) -> Vec<f64> {
    let v = image.normalized();
    if image.channels() == 1 {
        v
    } else {
        rgb2gray(&v, 3).expect("three channels")
    }
}

fn fft2(data: &mut [Complex<f64>], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    row.process(data);
    let mut column = vec![Complex::default(); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = data[y * width + x];
        }
        col.process(&mut column);
        for y in 0..height {
            data[y * width + x] = column[y];
        }
    }
    let norm = 1.0 / ((height * width) as f64).sqrt();
    data.iter_mut().for_each(|v| *v *= norm);
}

/// Signed frequency of DFT bin `u` in cycles per sample.
fn bin_frequency(u: usize, n: usize) -> f64 {
    let s = if 2 * u <= n { u as f64 } else { u as f64 - n as f64 };
    s / n as f64
}

/// Whether bin `(v, u)` is kept by the radial high-pass with cutoff `radius`
/// (a fraction of Nyquist).
pub fn fft_keeps(v: usize, u: usize, height: usize, width: usize, radius: f64) -> bool {
    let (fy, fx) = (bin_frequency(v, height), bin_frequency(u, width));
    (fy * fy + fx * fx).sqrt() / 0.5 >= radius
}

/// Orthonormal spectrum of `plane` with the low radial band zeroed.
pub fn fft_masked_spectrum(
    plane: &[f64],
    height: usize,
    width: usize,
    radius: f64,
) -> Result<Vec<Complex<f64>>, FrequencyError> {
    check_plane(plane, height, width)?;
    let mut spec: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut spec, height, width, false);
    for v in 0..height {
        for u in 0..width {
            if !fft_keeps(v, u, height, width, radius) {
                spec[v * width + u] = Complex::default();
            }
        }
    }
    Ok(spec)
}

fn fft_highpass(plane: &[f64], height: usize, width: usize, radius: f64) -> Result<Vec<f64>, FrequencyError> {
    let mut spec = fft_masked_spectrum(plane, height, width, radius)?;
    fft2(&mut spec, height, width, true);
    Ok(spec.into_iter().map(|c| c.re).collect())
}

// One Haar step on `n` strided samples: averages first (with an odd tail
// carried over unchanged), then half-differences.
fn haar_step(buf: &mut [f64], scratch: &mut Vec<f64>, n: usize, forward: bool) {
    let half = n / 2;
    let approx = half + n % 2;
    scratch.clear();
    scratch.extend_from_slice(&buf[..n]);
    if forward {
        for i in 0..half {
            let (a, b) = (scratch[2 * i], scratch[2 * i + 1]);
            buf[i] = (a + b) / 2.0;
            buf[approx + i] = (a - b) / 2.0;
        }
        if n % 2 == 1 {
            buf[half] = scratch[n - 1];
        }
    } else {
        for i in 0..half {
            let (a, d) = (scratch[i], scratch[approx + i]);
            buf[2 * i] = a + d;
            buf[2 * i + 1] = a - d;
        }
        if n % 2 == 1 {
            buf[n - 1] = scratch[half];
        }
    }
}

fn haar_rows(plane: &mut [f64], width: usize, rows: usize, cols: usize, forward: bool) {
    let mut scratch = Vec::with_capacity(cols);
    for y in 0..rows {
        haar_step(&mut plane[y * width..y * width + cols], &mut scratch, cols, forward);
    }
}

fn haar_cols(plane: &mut [f64], width: usize, rows: usize, cols: usize, forward: bool) {
    let (mut line, mut scratch) = (vec![0.0; rows], Vec::with_capacity(rows));
    for x in 0..cols {
        for y in 0..rows {
            line[y] = plane[y * width + x];
        }
        haar_step(&mut line, &mut scratch, rows, forward);
        for y in 0..rows {
            plane[y * width + x] = line[y];
        }
    }
}

fn haar_pass(plane: &mut [f64], width: usize, rows: usize, cols: usize, forward: bool) {
    if forward {
        haar_rows(plane, width, rows, cols, true);
        haar_cols(plane, width, rows, cols, true);
    } else {
        haar_cols(plane, width, rows, cols, false);
        haar_rows(plane, width, rows, cols, false);
    }
}

fn haar_extents(height: usize, width: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut ext = Vec::with_capacity(levels + 1);
    let (mut h, mut w) = (height, width);
    for _ in 0..=levels {
        ext.push((h, w));
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    ext
}

/// In-place `levels`-deep 2-D Haar analysis. The approximation band of the
/// last level occupies the top-left `ceil(h/2^l) x ceil(w/2^l)` corner.
pub fn haar_forward(plane: &mut [f64], height: usize, width: usize, levels: usize) -> Result<(), FrequencyError> {
    check_plane(plane, height, width)?;
    for &(h, w) in &haar_extents(height, width, levels)[..levels] {
        haar_pass(plane, width, h, w, true);
    }
    Ok(())
}

/// Inverse of [`haar_forward`].
pub fn haar_inverse(plane: &mut [f64], height: usize, width: usize, levels: usize) -> Result<(), FrequencyError> {
    check_plane(plane, height, width)?;
    for &(h, w) in haar_extents(height, width, levels)[..levels].iter().rev() {
        haar_pass(plane, width, h, w, false);
    }
    Ok(())
}

fn haar_highpass(plane: &[f64], height: usize, width: usize, levels: usize) -> Result<Vec<f64>, FrequencyError> {
    let mut c = plane.to_vec();
    haar_forward(&mut c, height, width, levels)?;
    let (lh, lw) = haar_extents(height, width, levels)[levels];
    for y in 0..lh {
        c[y * width..y * width + lw].iter_mut().for_each(|v| *v = 0.0);
    }
    haar_inverse(&mut c, height, width, levels)?;
    Ok(c)
}

/// Unclamped high-frequency residual of a grayscale plane.
pub fn residual(plane: &[f64], height: usize, width: usize, cfg: &FrequencyConfig) -> Result<Vec<f64>, FrequencyError> {
    check_plane(plane, height, width)?;
    cfg.validate(height, width)?;
    match cfg.method {
        Method::Gaussian => {
            let kernel = gaussian_kernel(cfg.kernel_size, cfg.sigma())?;
            let low = blur(plane, height, width, &kernel)?;
            Ok(plane.iter().zip(&low).map(|(x, l)| x - l).collect())
        }
        Method::Fft => fft_highpass(plane, height, width, cfg.fft_radius),
        Method::Haar => haar_highpass(plane, height, width, cfg.haar_levels),
    }
}

/// `height x width` high-frequency map with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HighFreqImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

pub fn high_freq(image: &Image, cfg: &FrequencyConfig) -> Result<HighFreqImage, FrequencyError> {
    let (h, w, _) = image.resolution();
    let mut values = residual(&gray_plane(image), h, w, cfg)?;
    values.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(HighFreqImage { height: h, width: w, values })
}

/// Maps a clamped residual into `[0, 1]`.
pub fn remap(v: f64) -> f64 {
    (v + 1.0) / 2.0
}

/// Discretizes a residual onto `levels` evenly spaced values of `[-1, 1]`,
/// rounding half away from zero.
pub fn quantize_residual(v: f64, levels: usize) -> usize {
    (remap(v.clamp(-1.0, 1.0)) * (levels - 1) as f64).round() as usize
}

/// `[x, x_H]`: the normalized image with the remapped residual appended as a
/// last channel, HWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedInput {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl AugmentedInput {
    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(c).step_by(self.channels).copied()
    }
}

pub fn augment(image: &Image, cfg: &FrequencyConfig) -> Result<AugmentedInput, FrequencyError> {
    let hf = high_freq(image, cfg)?;
    let (h, w, c) = image.resolution();
    let x = image.normalized();
    let mut values = Vec::with_capacity(h * w * (c + 1));
    for (px, &r) in x.chunks_exact(c).zip(&hf.values) {
        values.extend_from_slice(px);
        values.push(remap(r));
    }
    Ok(AugmentedInput { height: h, width: w, channels: c + 1, values })
}
