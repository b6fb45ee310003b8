//! Dataset ingestion, synthetic OOD sets and image utilities.

mod fixtures;
mod idx;
mod image;
mod manifest;
mod ppm;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use fixtures::fixture_images;
pub use idx::{
    encode_idx_images, encode_idx_labels, images_from_idx, labels_from_idx, load_idx, parse_idx, read_maybe_gz,
    IdxHeader, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use image::Image;
pub use manifest::{DatasetSource, Manifest};
pub use ppm::{decode_ppm, encode_ppm, load_ppm_dir, read_ppm, write_ppm};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("image has a zero dimension")]
    EmptyImage,
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error("expected {expected} pixel values, got {got}")]
    PixelCount { expected: usize, got: usize },
    #[error("bad IDX magic {0:#010x}")]
    BadMagic(u32),
    #[error("truncated input: need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },
    #[error("IDX dimensions overflow")]
    DimOverflow,
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("images have mixed resolutions")]
    MixedResolution,
    #[error("resize target must be positive")]
    ZeroTarget,
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

/// Named, ordered collection of equally sized images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    images: Vec<Image>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, images: Vec<Image>) -> Result<Self, DataError> {
        let first = images.first().ok_or(DataError::EmptyDataset)?.resolution();
        if images.iter().any(|i| i.resolution() != first) {
            return Err(DataError::MixedResolution);
        }
        Ok(Self { name: name.into(), split, images })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn into_images(self) -> Vec<Image> {
        self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(height, width, channels)` shared by every image.
    pub fn resolution(&self) -> (usize, usize, usize) {
        self.images[0].resolution()
    }

    /// First `n` images.
    pub fn truncated(mut self, n: usize) -> Result<Self, DataError> {
        self.images.truncate(n);
        Self::new(self.name, self.split, self.images)
    }

    /// Converts every image to `channels` via [`to_rgb`] / [`to_gray`].
    pub fn with_channels(self, channels: usize) -> Result<Self, DataError> {
        if self.resolution().2 == channels {
            return Ok(self);
        }
        let images = self.images.iter().map(|i| adapt_channels(i, channels)).collect::<Result<_, _>>()?;
        Self::new(self.name, self.split, images)
    }
}

/// Replicates a single channel three times.
pub fn to_rgb(image: &Image) -> Result<Image, DataError> {
    if image.channels() != 1 {
        return Err(DataError::Channels(image.channels()));
    }
    let pixels = image.pixels().iter().flat_map(|&p| [p, p, p]).collect();
    Image::new(image.height(), image.width(), 3, pixels)
}

/// BT.601 luma rounded to the nearest level.
pub fn to_gray(image: &Image) -> Result<Image, DataError> {
    if image.channels() != 3 {
        return Err(DataError::Channels(image.channels()));
    }
    let gray = crate::frequency::rgb2gray(&image.normalized(), 3).expect("three channels");
    Image::from_unit(image.height(), image.width(), 1, &gray)
}

pub fn adapt_channels(image: &Image, channels: usize) -> Result<Image, DataError> {
    match (image.channels(), channels) {
        (a, b) if a == b => Ok(image.clone()),
        (1, 3) => to_rgb(image),
        (3, 1) => to_gray(image),
        (_, b) => Err(DataError::Channels(b)),
    }
}

/// Bilinear interpolation with aligned corners on an HWC plane: output pixel
/// `i` samples source coordinate `i * (n - 1) / (n' - 1)` (0 when `n' = 1`).
pub fn resize_plane(values: &[f64], h: usize, w: usize, c: usize, th: usize, tw: usize) -> Result<Vec<f64>, DataError> {
    if th == 0 || tw == 0 {
        return Err(DataError::ZeroTarget);
    }
    if values.len() != h * w * c || values.is_empty() {
        return Err(DataError::PixelCount { expected: h * w * c, got: values.len() });
    }
    let coord = |i: usize, n: usize, tn: usize| -> (usize, usize, f64) {
        if tn == 1 || n == 1 {
            return (0, 0, 0.0);
        }
        let s = (i * (n - 1)) as f64 / (tn - 1) as f64;
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(th * tw * c);
    for y in 0..th {
        let (y0, y1, fy) = coord(y, h, th);
        for x in 0..tw {
            let (x0, x1, fx) = coord(x, w, tw);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| values[(yy * w + xx) * c + ch];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Ok(out)
}

pub fn resize(image: &Image, height: usize, width: usize) -> Result<Image, DataError> {
    if height == 0 || width == 0 {
        return Err(DataError::ZeroTarget);
    }
    let (h, w, c) = image.resolution();
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let v = resize_plane(&image.normalized(), h, w, c, height, width)?;
    Image::from_unit(height, width, c, &v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Noise,
    Constant,
}

/// Procedural OOD set: i.i.d. uniform levels (`noise`) or one uniformly drawn
/// level per image (`constant`).
pub fn synth_ood(
    kind: SynthKind,
    count: usize,
    resolution: (usize, usize, usize),
    seed: u64,
) -> Result<Dataset, DataError> {
    if count == 0 {
        return Err(DataError::EmptyDataset);
    }
    let (h, w, c) = resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count)
        .map(|_| match kind {
            SynthKind::Noise => Image::new(h, w, c, (0..h * w * c).map(|_| rng.random()).collect()),
            SynthKind::Constant => Image::filled(h, w, c, rng.random()),
        })
        .collect::<Result<_, _>>()?;
    let name = match kind {
        SynthKind::Noise => "noise",
        SynthKind::Constant => "constant",
    };
    Dataset::new(name, Split::Test, images)
}
