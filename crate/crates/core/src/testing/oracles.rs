//! Brute-force reference computations.

use std::f64::consts::PI;

/// Half-sample symmetric mirror of `i` into `0..n`, by repeated reflection.
pub fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// 2-D convolution of `plane` with the outer product of `kernel` with itself,
/// mirrored borders, as a plain four-deep loop.
pub fn naive_blur(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, a) in kernel.iter().enumerate() {
                for (kx, b) in kernel.iter().enumerate() {
                    let sy = mirror(y as isize + ky as isize - r, h);
                    let sx = mirror(x as isize + kx as isize - r, w);
                    acc += a * b * plane[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Sampled Gaussian `exp(-d^2 / 2 sigma^2)` over `-(k/2)..=k/2`, normalized.
pub fn gaussian_taps(k: usize, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as f64;
    let t: Vec<f64> = (0..k).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Orthonormal 2-D DFT by direct summation, `(re, im)` row-major.
pub fn dense_dft(plane: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let mut out = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -2.0 * PI * ((v * y) as f64 / h as f64 + (u * x) as f64 / w as f64);
                    re += plane[y * w + x] * a.cos();
                    im += plane[y * w + x] * a.sin();
                }
            }
            out.push((re * norm, im * norm));
        }
    }
    out
}

/// AUROC by counting every (ID, OOD) pair, ties one half.
pub fn auroc_all_pairs(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            wins += if b > a {
                1.0
            } else if b == a {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (id.len() * ood.len()) as f64
}

/// Mean SSIM computed window by window from the textbook formula: weighted
/// means, variances and covariance under an 11x11 Gaussian (sigma 1.5),
/// `C1 = 0.01^2`, `C2 = 0.03^2`, over all valid windows of an HWC image.
pub fn direct_ssim(x: &[f64], y: &[f64], h: usize, w: usize, c: usize) -> f64 {
    const K: usize = 11;
    let g = gaussian_taps(K, 1.5);
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for oy in 0..=h - K {
            for ox in 0..=w - K {
                let at = |img: &[f64], i: usize, j: usize| img[((oy + i) * w + ox + j) * c + ch];
                let wt = |i: usize, j: usize| g[i] * g[j];
                let mut mx = 0.0;
                let mut my = 0.0;
                for i in 0..K {
                    for j in 0..K {
                        mx += wt(i, j) * at(x, i, j);
                        my += wt(i, j) * at(y, i, j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        let (dx, dy) = (at(x, i, j) - mx, at(y, i, j) - my);
                        vx += wt(i, j) * dx * dx;
                        vy += wt(i, j) * dy * dy;
                        cov += wt(i, j) * dx * dy;
                    }
                }
                total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Corners-aligned bilinear sample of output pixel `(i, j)` when resizing an
/// `h x w` plane to `th x tw`.
pub fn bilinear_at(plane: &[f64], h: usize, w: usize, th: usize, tw: usize, i: usize, j: usize) -> f64 {
    let pos = |k: usize, n: usize, m: usize| if m == 1 { 0.0 } else { k as f64 * (n - 1) as f64 / (m - 1) as f64 };
    let (sy, sx) = (pos(i, h, th), pos(j, w, tw));
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let p = |y: usize, x: usize| plane[y * w + x];
    (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
}

/// Central-difference Jacobian of `f` at `x`, row-major `[out][in]`.
pub fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], eps: f64) -> Vec<Vec<f64>> {
    let m = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    let mut p = x.to_vec();
    for j in 0..x.len() {
        p[j] = x[j] + eps;
        let up = f(&p);
        p[j] = x[j] - eps;
        let down = f(&p);
        p[j] = x[j];
        for i in 0..m {
            jac[i][j] = (up[i] - down[i]) / (2.0 * eps);
        }
    }
    jac
}

/// `log ∫ exp(log_f(t)) dt` over `[lo, hi]` by the composite Simpson rule on
/// `2n` intervals, accumulated in log space.
pub fn log_quadrature(log_f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let m = 2 * n;
    let step = (hi - lo) / m as f64;
    let terms: Vec<f64> = (0..=m)
        .map(|i| {
            let wgt = if i == 0 || i == m {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            log_f(lo + i as f64 * step) + (wgt * step / 3.0_f64).ln()
        })
        .collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
}

/// Bitwise CRC-32 (IEEE, reflected) of `bytes`.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

/// Decoded 8-bit gray or RGB PNG: `(height, width, channels, pixels)`.
pub type DecodedPng = (usize, usize, usize, Vec<u8>);

/// Minimal PNG reader for non-interlaced 8-bit gray/RGB files: validates
/// chunk CRCs, inflates IDAT and reverses the five scanline filters.
pub fn decode_png(bytes: &[u8]) -> Result<DecodedPng, String> {
    use std::io::Read;
    if bytes.len() < 8 || bytes[..8] != [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a] {
        return Err("bad signature".into());
    }
    let mut pos = 8;
    let (mut h, mut w, mut c) = (0, 0, 0);
    let mut idat = Vec::new();
    let mut ended = false;
    while pos + 12 <= bytes.len() {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let kind = &bytes[pos + 4..pos + 8];
        let body = bytes.get(pos + 8..pos + 8 + len).ok_or("truncated chunk")?;
        let crc = u32::from_be_bytes(bytes[pos + 8 + len..pos + 12 + len].try_into().unwrap());
        if crc32(&bytes[pos + 4..pos + 8 + len]) != crc {
            return Err("bad crc".into());
        }
        match kind {
            b"IHDR" => {
                w = u32::from_be_bytes(body[0..4].try_into().unwrap()) as usize;
                h = u32::from_be_bytes(body[4..8].try_into().unwrap()) as usize;
                if body[8] != 8 || body[12] != 0 {
                    return Err("unsupported depth or interlace".into());
                }
                c = match body[9] {
                    0 => 1,
                    2 => 3,
                    t => return Err(format!("colour type {t}")),
                };
            }
            b"IDAT" => idat.extend_from_slice(body),
            b"IEND" => ended = true,
            _ => {}
        }
        pos += 12 + len;
    }
    if !ended || pos != bytes.len() {
        return Err("missing IEND or trailing bytes".into());
    }
    let mut raw = Vec::new();
    flate2::read::ZlibDecoder::new(&idat[..]).read_to_end(&mut raw).map_err(|e| e.to_string())?;
    let stride = w * c;
    if raw.len() != h * (stride + 1) {
        return Err("wrong scanline length".into());
    }
    let mut px = vec![0u8; h * stride];
    for y in 0..h {
        let filter = raw[y * (stride + 1)];
        for i in 0..stride {
            let v = raw[y * (stride + 1) + 1 + i];
            let a = if i >= c { px[y * stride + i - c] as i32 } else { 0 };
            let b = if y > 0 { px[(y - 1) * stride + i] as i32 } else { 0 };
            let cc = if y > 0 && i >= c { px[(y - 1) * stride + i - c] as i32 } else { 0 };
            let pred = match filter {
                0 => 0,
                1 => a,
                2 => b,
                3 => (a + b) / 2,
                4 => {
                    let p = a + b - cc;
                    let (pa, pb, pc) = ((p - a).abs(), (p - b).abs(), (p - cc).abs());
                    if pa <= pb && pa <= pc {
                        a
                    } else if pb <= pc {
                        b
                    } else {
                        cc
                    }
                }
                f => return Err(format!("filter {f}")),
            };
            px[y * stride + i] = (v as i32 + pred) as u8;
        }
    }
    Ok((h, w, c, px))
}
