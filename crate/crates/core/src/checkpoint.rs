//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CSTNCKPT"
//! version  u32
//! epoch    u64
//! config   u32 length + UTF-8 TOML
//! rng      32-byte seed, u64 stream, u128 word position
//! count    u32
//! tensors  count × (u16 name length, name, u32 ndim, ndim × u64 dims, f64 values)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"CSTNCKPT";
pub const VERSION: u32 = 1;

/// Snapshot of a generator's position in its stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    /// TOML snapshot of the training config.
    pub config: String,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let cfg = self.config.as_bytes();
        out.extend_from_slice(&u32::try_from(cfg.len()).map_err(|_| too_big("config"))?.to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(|_| too_big("tensor table"))?.to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&u16::try_from(nb.len()).map_err(|_| too_big("tensor name"))?.to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.error_at(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let epoch = r.u64()?;
        let cfg_len = r.u32()? as usize;
        let at = r.pos;
        let config = String::from_utf8(r.take(cfg_len)?.to_vec()).map_err(|_| r.error_at(at, "config is not UTF-8"))?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.error_at(at, "tensor name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(r.error_at(r.pos, &format!("tensor {name} claims {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.error_at(r.pos, &format!("tensor {name} {shape:?} exceeds the file")))?;
            let data = r
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(r.error_at(r.pos, "trailing bytes after tensor table"));
        }
        Ok(Self {
            epoch,
            config,
            rng: RngState { seed, stream, word_pos },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

fn too_big(what: &str) -> Error {
    Error::InvalidArgument(format!("{what} too large for the checkpoint format"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, msg: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.to_string(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error_at(self.bytes.len(), &format!("truncated: needed {n} bytes at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            epoch: 3,
            config: "seed = 1\n".into(),
            rng: RngState {
                seed: [7; 32],
                stream: 9,
                word_pos: 123_456_789_012_345,
            },
            tensors: vec![
                ("a".into(), Tensor::new(&[2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("b.c".into(), Tensor::scalar(0.125)),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"CSTNCKPT");
        assert_eq!(Checkpoint::from_bytes(&bytes, Path::new("c")).unwrap(), c);
    }

    #[test]
    fn version_mismatch_is_refused() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        match Checkpoint::from_bytes(&bytes, Path::new("c")) {
            Err(Error::Version { found: 2, expected: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_and_garbage_are_errors() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut], Path::new("c")).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, Path::new("c")).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, Path::new("c")), Err(Error::Parse { offset: 0, .. })));
    }
}
