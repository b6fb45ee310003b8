//! Input complexity as the size of a deterministic PNG encoding.
//!
//! Pipeline: per-row filter selection by minimum sum of absolute signed
//! filtered bytes over None/Sub/Up/Average/Paeth (first filter wins ties), then
//! a zlib stream at level 9 with the default window and strategy. The reported
//! length counts the whole file: signature, IHDR, IDAT and IEND.

use crate::data::Image;

pub const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];
pub const DEFLATE_LEVEL: u8 = 9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityScore {
    pub code_bits: f64,
    pub bits_per_dim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Filter {
    None = 0,
    Sub = 1,
    Up = 2,
    Average = 3,
    Paeth = 4,
}

impl Filter {
    pub const ALL: [Filter; 5] = [Filter::None, Filter::Sub, Filter::Up, Filter::Average, Filter::Paeth];
}

fn paeth(a: u8, b: u8, c: u8) -> u8 {
    let p = a as i16 + b as i16 - c as i16;
    let (pa, pb, pc) = ((p - a as i16).abs(), (p - b as i16).abs(), (p - c as i16).abs());
    if pa <= pb && pa <= pc {
        a
    } else if pb <= pc {
        b
    } else {
        c
    }
}

/// Applies `filter` to `row` given the previous (unfiltered) row.
pub fn filter_row(filter: Filter, row: &[u8], prev: &[u8], bpp: usize, out: &mut Vec<u8>) {
    out.clear();
    for i in 0..row.len() {
        let a = if i >= bpp { row[i - bpp] } else { 0 };
        let b = prev[i];
        let c = if i >= bpp { prev[i - bpp] } else { 0 };
        let pred = match filter {
            Filter::None => 0,
            Filter::Sub => a,
            Filter::Up => b,
            Filter::Average => ((a as u16 + b as u16) / 2) as u8,
            Filter::Paeth => paeth(a, b, c),
        };
        out.push(row[i].wrapping_sub(pred));
    }
}

fn cost(bytes: &[u8]) -> u64 {
    bytes.iter().map(|&b| (b as i8).unsigned_abs() as u64).sum()
}

/// Filtered scanlines, each prefixed by its filter type byte.
pub fn filtered_scanlines(image: &Image) -> Vec<u8> {
    let (h, w, c) = image.resolution();
    let stride = w * c;
    let zero = vec![0u8; stride];
    let mut out = Vec::with_capacity(h * (stride + 1));
    let (mut best, mut cand) = (Vec::with_capacity(stride), Vec::with_capacity(stride));
    for y in 0..h {
        let row = &image.pixels()[y * stride..][..stride];
        let prev = if y == 0 { &zero[..] } else { &image.pixels()[(y - 1) * stride..][..stride] };
        let mut best_filter = Filter::None;
        filter_row(Filter::None, row, prev, c, &mut best);
        let mut best_cost = cost(&best);
        for f in &Filter::ALL[1..] {
            filter_row(*f, row, prev, c, &mut cand);
            let k = cost(&cand);
            if k < best_cost {
                best_cost = k;
                best_filter = *f;
                std::mem::swap(&mut best, &mut cand);
            }
        }
        out.push(best_filter as u8);
        out.extend_from_slice(&best);
    }
    out
}

fn chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    let mut crc = crc32fast::Hasher::new();
    crc.update(kind);
    crc.update(data);
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    out.extend_from_slice(&crc.finalize().to_be_bytes());
}

/// Complete PNG file for an 8-bit grayscale or RGB image.
pub fn encode_png(image: &Image) -> Vec<u8> {
    let (h, w, c) = image.resolution();
    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(w as u32).to_be_bytes());
    ihdr.extend_from_slice(&(h as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, if c == 3 { 2 } else { 0 }, 0, 0, 0]);
    let idat = miniz_oxide::deflate::compress_to_vec_zlib(&filtered_scanlines(image), DEFLATE_LEVEL);
    let mut out = SIGNATURE.to_vec();
    chunk(&mut out, b"IHDR", &ihdr);
    chunk(&mut out, b"IDAT", &idat);
    chunk(&mut out, b"IEND", &[]);
    out
}

/// Code length of `image`. Images are non-empty by construction, so this
/// cannot fail.
pub fn png_code_length(image: &Image) -> ComplexityScore {
    let code_bits = 8.0 * encode_png(image).len() as f64;
    ComplexityScore { code_bits, bits_per_dim: code_bits / image.dim() as f64 }
}

/// `L(x)` in bits per dimension (`normalize`) or raw bits.
pub fn complexity(image: &Image, normalize: bool) -> f64 {
    let s = png_code_length(image);
    if normalize {
        s.bits_per_dim
    } else {
        s.code_bits
    }
}
