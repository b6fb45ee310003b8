//! Binary PPM (P6, maxval 255).

use std::path::Path;

use super::{DataError, Dataset, Image, Split};

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while bytes.get(*pos)?.is_ascii_whitespace() {
            *pos += 1;
        }
        if bytes[*pos] == b'#' {
            while *bytes.get(*pos)? != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, DataError> {
    let bad = |why: &str| DataError::Ppm(why.to_string());
    let mut pos = 0;
    if token(bytes, &mut pos) != Some(b"P6") {
        return Err(bad("missing P6 magic"));
    }
    let mut num = |what: &str| -> Result<usize, DataError> {
        token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("bad {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = w * h * 3;
    let raster = bytes.get(pos..pos + need).ok_or(DataError::Truncated { expected: pos + need, got: bytes.len() })?;
    Image::new(h, w, 3, raster.to_vec())
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let rgb;
    let img = if image.channels() == 3 {
        image
    } else {
        rgb = super::to_rgb(image).expect("one channel");
        &rgb
    };
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image, DataError> {
    let path = path.as_ref();
    decode_ppm(&std::fs::read(path).map_err(|e| DataError::io(path, e))?)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Image) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)).map_err(|e| DataError::io(path, e))
}

/// Loads every `*.ppm` file in a directory in lexicographic filename order.
///
/// Without `resize`, all files must share one resolution.
pub fn load_ppm_dir(dir: impl AsRef<Path>, resize: Option<(usize, usize)>) -> Result<Dataset, DataError> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    let mut images = Vec::with_capacity(files.len());
    for f in &files {
        let img = read_ppm(f)?;
        images.push(match resize {
            Some((h, w)) => super::resize(&img, h, w)?,
            None => img,
        });
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, Split::Test, images)
}
