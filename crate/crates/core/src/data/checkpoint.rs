//! Binary parameter checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "GFPC1"                      magic, 5 bytes
//! [u8; 32]                     SHA-256 digest of the model config
//! u32                          entry count
//! per entry, sorted by name:
//!   u16 name length, name bytes (UTF-8)
//!   u8 rank, rank x u32 dims
//!   prod(dims) x f32
//! ```

use std::path::Path;

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"GFPC1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub params: ParamSet<f32>,
}

pub fn hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode<T: Scalar>(params: &ParamSet<T>, digest: &[u8; 32]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(digest);
    let count = u32::try_from(params.len()).map_err(|_| Error::Contract("too many parameters".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params {
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("rank too large: {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dim too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_f32().expect("float").to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic; not a checkpoint file".into()));
    }
    let digest: [u8; 32] = cur.take(32, "digest")?.try_into().unwrap();
    let count = cur.u32("entry count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::CorruptCheckpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dims")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n > 0);
        let n = n.ok_or_else(|| Error::CorruptCheckpoint(format!("invalid shape {shape:?} for `{name}`")))?;
        let raw = cur.take(n.saturating_mul(4), "values")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate parameter `{name}`")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(Checkpoint { digest, params })
}

/// Parameters are stored as f32 regardless of `T`.
pub fn save_checkpoint<T: Scalar>(params: &ParamSet<T>, digest: &[u8; 32], path: &Path) -> Result<()> {
    let bytes = encode(params, digest)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads and refuses checkpoints written for a different config.
pub fn load_checkpoint_expecting(path: &Path, digest: &[u8; 32]) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if &ck.digest != digest {
        return Err(Error::DigestMismatch { expected: hex(digest), found: hex(&ck.digest) });
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        ParamSet::from([
            (
                "a.weight".to_string(),
                Tensor::new([2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, -7.0, 1e-30]).unwrap(),
            ),
            ("b".to_string(), Tensor::new([1], vec![42.0]).unwrap()),
        ])
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = sample();
        let ck = decode(&encode(&p, &[7; 32]).unwrap()).unwrap();
        assert_eq!(ck.digest, [7; 32]);
        for (name, t) in &p {
            let got = &ck.params[name];
            assert_eq!(got.shape(), t.shape());
            let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(got), bits(t));
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode(&sample(), &[0; 32]).unwrap();
        for cut in 0..bytes.len() {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::CorruptCheckpoint(_))));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn digest_mismatch_names_both() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("m.ckpt");
        save_checkpoint(&sample(), &[1; 32], &path).unwrap();
        match load_checkpoint_expecting(&path, &[2; 32]) {
            Err(Error::DigestMismatch { expected, found }) => {
                assert_eq!(expected, "02".repeat(32));
                assert_eq!(found, "01".repeat(32));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(load_checkpoint_expecting(&path, &[1; 32]).is_ok());
    }
}
