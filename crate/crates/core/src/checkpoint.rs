//! Model checkpoint format.
//!
//! Little-endian binary: the 8-byte magic `DALCKPT1`, then the network shape
//! as four `u64` (`input_dim`, `hidden1`, `hidden2`, `classes`), then the six
//! tensors `w1, b1, w2, b2, wc, bc`, each as `rows: u64`, `cols: u64` and
//! `rows * cols` row-major `f64` values. Biases are stored as `1 x n`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{ModelParams, NetShape};

const MAGIC: &[u8; 8] = b"DALCKPT1";

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let shape = params.shape();
    let mut out = Vec::with_capacity(8 + 32 + params.parameter_count() * 8 + 96);
    out.extend_from_slice(MAGIC);
    for v in [shape.input_dim, shape.hidden1, shape.hidden2, shape.classes] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for t in params.tensors() {
        out.extend_from_slice(&(t.shape.0 as u64).to_le_bytes());
        out.extend_from_slice(&(t.shape.1 as u64).to_le_bytes());
        for v in t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let mut pos = MAGIC.len();
    let mut next_u64 = || -> Result<u64> {
        let b = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| Error::format(path, "truncated checkpoint"))?;
        pos += 8;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    };
    let shape = NetShape {
        input_dim: next_u64()? as usize,
        hidden1: next_u64()? as usize,
        hidden2: next_u64()? as usize,
        classes: next_u64()? as usize,
    };
    let mut params = ModelParams::zeros(shape);
    let expected = params.tensors().map(|t| (t.name, t.shape));
    for (tensor, (name, want)) in params.tensors_mut().into_iter().zip(expected) {
        let rows = next_u64()? as usize;
        let cols = next_u64()? as usize;
        if (rows, cols) != want {
            return Err(Error::format(
                path,
                format!(
                    "tensor {name} is {rows}x{cols}, shape header implies {}x{}",
                    want.0, want.1
                ),
            ));
        }
        for v in tensor.values.iter_mut() {
            *v = f64::from_bits(next_u64()?);
        }
    }
    if pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Hex SHA-256 of the checkpoint encoding.
pub fn digest(params: &ModelParams) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(to_bytes(params)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::init(NetShape::new(12, 4), &mut rng);
        p.bc[1] = -0.0;
        p.b1[3] = f64::MIN_POSITIVE / 4.0;
        let back = from_bytes(&to_bytes(&p), Path::new("mem")).unwrap();
        assert_eq!(to_bytes(&back), to_bytes(&p));
        assert_eq!(back.fingerprint(), p.fingerprint());
    }

    #[test]
    fn corrupt_inputs_fail() {
        let p = ModelParams::zeros(NetShape::new(3, 2));
        let bytes = to_bytes(&p);
        assert!(from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(from_bytes(b"garbage", Path::new("x")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra, Path::new("x")).is_err());
    }
}
