//! Versioned binary checkpoints for [`HeadParams`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "GVMFHEAD"
//! version      u32
//! input        u64
//! hidden       u64
//! components   u64
//! source       u8        0 = hashed n-grams, 1 = external embeddings
//! feat.dim     u64
//! ngram_min    u64
//! ngram_max    u64
//! lowercase    u8
//! hash_seed    u64
//! count        u64       number of f64 values that follow
//! values       count × f64
//! crc32        u32       over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeaturizerConfig;
use crate::head::{HeadDims, HeadParams};

pub const MAGIC: &[u8; 8] = b"GVMFHEAD";
pub const FORMAT_VERSION: u32 = 1;

/// Where a model's input vectors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Hashed(FeaturizerConfig),
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub features: FeatureSource,
    pub params: HeadParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.params.dims();
        let values = self.params.values();
        let mut buf = Vec::with_capacity(80 + 8 * values.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [dims.input, dims.hidden, dims.components] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        let (source, cfg) = match self.features {
            FeatureSource::Hashed(cfg) => (0u8, cfg),
            FeatureSource::External => (
                1u8,
                FeaturizerConfig {
                    dim: dims.input,
                    ..Default::default()
                },
            ),
        };
        buf.push(source);
        for v in [cfg.dim, cfg.ngram_min, cfg.ngram_max] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.push(cfg.lowercase as u8);
        buf.extend_from_slice(&cfg.hash_seed.to_le_bytes());
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 4 {
            return Err(Error::Checksum(format!("file is only {} bytes", bytes.len())));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checksum(format!(
                "crc32 mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }

        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checksum("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let dims = HeadDims::new(r.usize()?, r.usize()?, r.usize()?)?;
        let source = r.u8()?;
        let cfg = FeaturizerConfig {
            dim: r.usize()?,
            ngram_min: r.usize()?,
            ngram_max: r.usize()?,
            lowercase: r.u8()? != 0,
            hash_seed: r.u64()?,
        };
        let features = match source {
            0 => FeatureSource::Hashed(cfg),
            1 => FeatureSource::External,
            other => return Err(Error::Checksum(format!("unknown feature source {other}"))),
        };
        let count = r.usize()?;
        if count != dims.param_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for dims {dims}", dims.param_count()),
                actual: format!("{count} values"),
            });
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
        }
        if r.pos != body.len() {
            return Err(Error::Checksum("trailing bytes after parameters".into()));
        }
        Ok(Checkpoint {
            features,
            params: HeadParams::from_values(dims, values)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the stored dimensions against `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: HeadDims) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let found = ckpt.params.dims();
        if found != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_string(),
                actual: found.to_string(),
            });
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Checksum("unexpected end of data".into()));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checksum(format!("size {v} does not fit")))
    }
}
