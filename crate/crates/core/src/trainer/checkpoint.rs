//! Versioned binary parameter container.
//!
//! Layout (little-endian): magic `MEMECKPT`, version `u32`, kind `u8`,
//! epoch `u64`, SHA-256 of the config JSON (32 bytes), config length `u32`
//! and UTF-8 bytes, tensor count `u32`, then per tensor: name length `u16`,
//! name, dtype `u8` (0 = f64), rank `u8`, dims `u64`×rank, values. A SHA-256
//! of everything before it closes the file.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"MEMECKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const TRAILER: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Gan,
    Damsm,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Gan => 0,
            CheckpointKind::Damsm => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub epoch: u64,
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn config_digest(&self) -> [u8; 32] {
        Sha256::digest(self.config_json.as_bytes()).into()
    }

    /// Tensors whose names start with `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.config_digest());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.ndim() as u8);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, reason: &str| Error::CorruptCheckpoint { offset, reason: reason.to_string() };
        let header = MAGIC.len() + 4;
        if bytes.len() < header + TRAILER {
            return Err(corrupt(bytes.len(), "truncated"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let body_end = bytes.len() - TRAILER;
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(corrupt(body_end, "checksum mismatch"));
        }
        let mut r = Reader { bytes: &bytes[..body_end], pos: header };
        let kind = match r.u8()? {
            0 => CheckpointKind::Gan,
            1 => CheckpointKind::Damsm,
            _ => return Err(corrupt(r.pos - 1, "unknown checkpoint kind")),
        };
        let epoch = r.u64()?;
        let digest_at = r.pos;
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let len = r.u32()? as usize;
        let config_at = r.pos;
        let config_json = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt(config_at, "config is not UTF-8"))?;
        if <[u8; 32]>::from(Sha256::digest(config_json.as_bytes())) != digest {
            return Err(corrupt(digest_at, "config digest mismatch"));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt(name_at, "name is not UTF-8"))?;
            let dtype_at = r.pos;
            if r.u8()? != DTYPE_F64 {
                return Err(corrupt(dtype_at, "unsupported dtype"));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = numel(&shape);
            let data_at = r.pos;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt(data_at, "tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        if r.pos != body_end {
            return Err(corrupt(r.pos, "trailing bytes"));
        }
        Ok(Self { kind, epoch, config_json, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::CorruptCheckpoint { offset: self.pos, reason: format!("need {n} bytes") }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Write atomically via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("write {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("rename to {}", path.display()), e))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Gan,
            epoch: 15,
            config_json: r#"{"a":1}"#.into(),
            tensors: vec![
                ("g.w".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, -0.0])),
                ("d.b".into(), Tensor::scalar(7.25)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.epoch, 15);
        assert_eq!(back.section("g"), vec![("w".to_string(), c.tensors[0].1.clone())]);
    }

    #[test]
    fn truncation_and_tampering_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint { .. })), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptCheckpoint { .. })));
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&versioned), Err(Error::CheckpointVersion { found: 9, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&sample(), &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), sample());
        assert!(!dir.path().join("x.tmp").exists());
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(vals in proptest::collection::vec(any::<f64>(), 0..40), epoch in any::<u64>()) {
            let n = vals.len();
            let c = Checkpoint {
                kind: CheckpointKind::Damsm,
                epoch,
                config_json: "{}".into(),
                tensors: vec![("t".into(), Tensor::new(vec![n], vals))],
            };
            let bytes = c.to_bytes();
            prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        }
    }
}
