use serde::{Deserialize, Serialize};

use super::ScoringError;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub mse: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Normalized `size x size` Gaussian window, row-major.
pub fn ssim_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    g.iter().flat_map(|a| g.iter().map(move |b| a * b / total)).collect()
}

/// Mean SSIM over every fully contained window and channel of two HWC images
/// with values in `[0, 1]`. Images smaller than the 11-pixel window use the
/// largest odd window that fits.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize, c: usize) -> Result<f64, ScoringError> {
    check(x, y, h, w, c)?;
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size.is_multiple_of(2) {
        size -= 1;
    }
    let win = ssim_window(size, SSIM_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (oh, ow) = (h - size + 1, w - size + 1);
    let mut total = 0.0;
    for ch in 0..c {
        // Separable sums would be faster; windows are tiny at these sizes.
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..size {
                    for kx in 0..size {
                        let wv = win[ky * size + kx];
                        let i = ((oy + ky) * w + ox + kx) * c + ch;
                        let (a, b) = (x[i], y[i]);
                        mx += wv * a;
                        my += wv * b;
                        sxx += wv * a * a;
                        syy += wv * b * b;
                        sxy += wv * a * b;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

fn check(x: &[f64], y: &[f64], h: usize, w: usize, c: usize) -> Result<(), ScoringError> {
    if x.len() != y.len() || x.len() != h * w * c || x.is_empty() {
        return Err(ScoringError::ShapeMismatch { left: x.len(), right: y.len() });
    }
    Ok(())
}

/// MSE, MAE, PSNR (peak 1, capped at 100 dB) and SSIM.
pub fn recon_metrics(x: &[f64], y: &[f64], h: usize, w: usize, c: usize) -> Result<ReconMetrics, ScoringError> {
    check(x, y, h, w, c)?;
    let n = x.len() as f64;
    let mse = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let mae = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let psnr = if mse < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) };
    Ok(ReconMetrics { mse, mae, psnr, ssim: ssim(x, y, h, w, c)? })
}
