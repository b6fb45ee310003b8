//! Parameter checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "FRL1"
//! repeated until EOF:
//!   name_len, name (UTF-8), rank, dims[rank], f32 values (LE)
//! ```

use std::io::{self, Read, Write};

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"FRL1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint parameter name is not UTF-8")]
    BadName,
    #[error("checkpoint parameter {0:?} has an invalid shape")]
    BadShape(String),
    #[error("duplicate parameter {0:?} in checkpoint")]
    Duplicate(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_params(params: &ParamStore<f32>, mut out: impl Write) -> io::Result<()> {
    out.write_all(MAGIC)?;
    for (name, t) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes(params: &ParamStore<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_params(params, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &'static str) -> Result<u32, CheckpointError> {
    let b = bytes.get(*pos..*pos + 4).ok_or(CheckpointError::Truncated(what))?;
    *pos += 4;
    Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore<f32>, CheckpointError> {
    let magic: [u8; 4] = bytes.get(..4).ok_or(CheckpointError::Truncated("magic"))?.try_into().expect("four bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut pos = 4;
    let mut store = ParamStore::new();
    while pos < bytes.len() {
        let name_len = read_u32(bytes, &mut pos, "name length")? as usize;
        let raw = bytes.get(pos..pos + name_len).ok_or(CheckpointError::Truncated("name"))?;
        let name = std::str::from_utf8(raw).map_err(|_| CheckpointError::BadName)?.to_string();
        pos += name_len;
        let rank = read_u32(bytes, &mut pos, "rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(bytes, &mut pos, "dims")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| CheckpointError::BadShape(name.clone()))?;
        let byte_len = numel.checked_mul(4).ok_or_else(|| CheckpointError::BadShape(name.clone()))?;
        let raw = bytes.get(pos..pos + byte_len).ok_or(CheckpointError::Truncated("values"))?;
        pos += byte_len;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        let tensor = Tensor::new(dims, data).map_err(|_| CheckpointError::BadShape(name.clone()))?;
        store.add(name.clone(), tensor).map_err(|_| CheckpointError::Duplicate(name))?;
    }
    Ok(store)
}

pub fn read_params(mut input: impl Read) -> Result<ParamStore<f32>, CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_pinned() {
        let mut s = ParamStore::new();
        s.add("ab", Tensor::new([2], vec![1.0f32, -2.0]).unwrap()).unwrap();
        let bytes = to_bytes(&s);
        let mut want = b"FRL1".to_vec();
        want.extend_from_slice(&[2, 0, 0, 0, b'a', b'b', 1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(from_bytes(b"FRL2"), Err(CheckpointError::BadMagic(_))));
        let mut s = ParamStore::new();
        s.add("w", Tensor::new([3], vec![1.0f32, 2.0, 3.0]).unwrap()).unwrap();
        let bytes = to_bytes(&s);
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated(_))));
    }

    proptest! {
        #[test]
        fn round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 1..5), seed in any::<u32>()) {
            let mut s = ParamStore::new();
            for (i, shape) in shapes.iter().enumerate() {
                let t = Tensor::from_fn(shape.clone(), |j| ((j as u32 ^ seed) as f32).sin());
                s.add(format!("layer{i}.w"), t).unwrap();
            }
            let back = from_bytes(&to_bytes(&s)).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
