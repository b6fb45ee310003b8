//! Index arithmetic shared by the convolution ops and the image filters.

use super::Real;

/// How samples outside the image are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Out-of-range samples read as zero.
    #[default]
    Zero,
    /// Edge-including mirror: `... c b a | a b c d | d c b ...`.
    ///
    /// This is the half-sample symmetric extension, under which a normalized
    /// kernel preserves the image sum exactly.
    Reflect,
}

impl PadMode {
    /// Maps a possibly out-of-range coordinate to a source index.
    #[inline]
    pub fn source(self, i: isize, n: usize) -> Option<usize> {
        let n_i = n as isize;
        if (0..n_i).contains(&i) {
            return Some(i as usize);
        }
        match self {
            PadMode::Zero => None,
            PadMode::Reflect => {
                let period = 2 * n_i;
                let m = i.rem_euclid(period);
                Some(if m < n_i { m as usize } else { (period - 1 - m) as usize })
            }
        }
    }
}

/// Window geometry between an image of `channels x height x width` and the
/// `out_h x out_w` grid of window positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub mode: PadMode,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Output extent of a strided window pass, if any window fits.
    pub fn output_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
    }

    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        // f(row, position, image_offset) for every in-range tap.
        let (k, s, p) = (self.kernel, self.stride as isize, self.pad as isize);
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ky as isize - p;
                        let Some(sy) = self.mode.source(iy, self.height) else { continue };
                        for ox in 0..self.out_w {
                            let ix = ox as isize * s + kx as isize - p;
                            let Some(sx) = self.mode.source(ix, self.width) else { continue };
                            f(row, oy * self.out_w + ox, (c * self.height + sy) * self.width + sx);
                        }
                    }
                }
            }
        }
    }

    /// Unfolds `batch` images into a `rows x (batch * positions)` matrix.
    pub fn im2col<T: Real>(&self, images: &[T], batch: usize) -> Vec<T> {
        let (rows, pos, len) = (self.rows(), self.positions(), self.image_len());
        debug_assert_eq!(images.len(), batch * len);
        let cols_n = batch * pos;
        let mut cols = vec![T::zero(); rows * cols_n];
        for b in 0..batch {
            let img = &images[b * len..(b + 1) * len];
            self.for_each_tap(|row, p, off| cols[row * cols_n + b * pos + p] = img[off]);
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into images.
    pub fn col2im<T: Real>(&self, cols: &[T], batch: usize, images: &mut [T]) {
        let (pos, len) = (self.positions(), self.image_len());
        let cols_n = batch * pos;
        debug_assert_eq!(cols.len(), self.rows() * cols_n);
        for b in 0..batch {
            let img = &mut images[b * len..(b + 1) * len];
            self.for_each_tap(|row, p, off| img[off] += cols[row * cols_n + b * pos + p]);
        }
    }
}

/// Reorders `[channels, batch * positions]` into `[batch, channels, positions]`.
pub fn channel_major_to_batch<T: Real>(src: &[T], channels: usize, batch: usize, positions: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for c in 0..channels {
        for b in 0..batch {
            let s = &src[c * batch * positions + b * positions..][..positions];
            out[(b * channels + c) * positions..][..positions].copy_from_slice(s);
        }
    }
    out
}

/// Inverse of [`channel_major_to_batch`].
pub fn batch_to_channel_major<T: Real>(src: &[T], channels: usize, batch: usize, positions: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for c in 0..channels {
            let s = &src[(b * channels + c) * positions..][..positions];
            out[c * batch * positions + b * positions..][..positions].copy_from_slice(s);
        }
    }
    out
}

/// `(outer, len, inner)` split of a shape around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
