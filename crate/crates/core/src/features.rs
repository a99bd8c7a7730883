//! Text featurization: hashed character n-gram counts, or vectors loaded from
//! an external embedding file.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// A dense feature vector of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &FeatureVector) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        dot / (self.norm() * other.norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub lowercase: bool,
    pub hash_seed: u64,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            dim: 4096,
            ngram_min: 3,
            ngram_max: 5,
            lowercase: true,
            hash_seed: 0,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.dim.is_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "feature dimension {} is not a power of two",
                self.dim
            )));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(Error::InvalidParameter(format!(
                "invalid n-gram range {}..={}",
                self.ngram_min, self.ngram_max
            )));
        }
        Ok(())
    }
}

/// FNV-1a over `bytes`, starting from the offset basis mixed with `seed`.
pub(crate) fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hashed character n-gram counts, L2-normalized.
///
/// Text is NFC-normalized (and lowercased if configured); n-grams are taken
/// over Unicode scalar values and hashed as UTF-8. Empty text yields the zero
/// vector.
pub fn featurize(text: &str, cfg: &FeaturizerConfig) -> FeatureVector {
    let normalized: String = if cfg.lowercase {
        text.nfc().collect::<String>().to_lowercase()
    } else {
        text.nfc().collect()
    };
    let mut values = vec![0.0; cfg.dim];
    let mask = (cfg.dim as u64).wrapping_sub(1);
    // byte offset of every char boundary, plus the end
    let bounds: Vec<usize> = normalized
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(normalized.len()))
        .collect();
    let n_chars = bounds.len() - 1;
    for n in cfg.ngram_min..=cfg.ngram_max {
        if n > n_chars {
            break;
        }
        for start in 0..=(n_chars - n) {
            let gram = &normalized.as_bytes()[bounds[start]..bounds[start + n]];
            values[(fnv1a(gram, cfg.hash_seed) & mask) as usize] += 1.0;
        }
    }
    let v = FeatureVector(values);
    let norm = v.norm();
    if norm == 0.0 {
        if !text.is_empty() {
            log::warn!("text shorter than the smallest n-gram featurizes to zero: {text:?}");
        }
        return v;
    }
    FeatureVector(v.0.into_iter().map(|x| x / norm).collect())
}

/// Reads an embedding file: a header `id<TAB>dim=D`, then one
/// `id<TAB>v1<TAB>...<TAB>vD` row per record.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<HashMap<String, FeatureVector>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path)
}

fn parse_embeddings(text: &str, path: &Path) -> Result<HashMap<String, FeatureVector>> {
    let malformed = |line: usize, reason: String| Error::MalformedRow {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| malformed(1, "missing header".into()))?;
    let dim = header
        .split('\t')
        .nth(1)
        .and_then(|f| f.strip_prefix("dim="))
        .and_then(|d| d.trim().parse::<usize>().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| malformed(1, format!("expected `id<TAB>dim=D`, got {header:?}")))?;

    let mut out = HashMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default();
        if id.is_empty() {
            return Err(malformed(lineno, "empty id".into()));
        }
        let values = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| malformed(lineno, format!("bad value {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(malformed(
                lineno,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        if out.insert(id.to_string(), FeatureVector(values)).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    Ok(out)
}
