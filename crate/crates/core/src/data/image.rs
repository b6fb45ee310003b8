use super::DataError;

/// `height x width x channels` raster of 8-bit levels, stored row-major HWC.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if height == 0 || width == 0 {
            return Err(DataError::EmptyImage);
        }
        if channels != 1 && channels != 3 {
            return Err(DataError::Channels(channels));
        }
        if pixels.len() != height * width * channels {
            return Err(DataError::PixelCount { expected: height * width * channels, got: pixels.len() });
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, level: u8) -> Result<Self, DataError> {
        Self::new(height, width, channels, vec![level; height * width * channels])
    }

    /// Quantizes values in `[0, 1]` (clamped) to the nearest level.
    pub fn from_unit(height: usize, width: usize, channels: usize, values: &[f64]) -> Result<Self, DataError> {
        let pixels = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self::new(height, width, channels, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Number of pixel-channel entries.
    pub fn dim(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Values divided by 255, HWC order.
    pub fn normalized(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }
}
