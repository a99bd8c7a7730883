//! Geocoded text corpora: JSONL I/O, validation, and seeded splits.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{featurize, FeatureVector, FeaturizerConfig};
use crate::sphere::GeoPoint;
use crate::train::Example;

/// Slack added before flooring split sizes so that fractions formed as
/// exact ratios of counts are not rounded down by representation error.
const SPLIT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct GeoTextRecord {
    pub id: String,
    pub text: String,
    pub location: GeoPoint,
    pub title: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    lat: f64,
    lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    title: Option<String>,
}

impl TryFrom<RawRecord> for GeoTextRecord {
    type Error = Error;

    fn try_from(r: RawRecord) -> Result<Self> {
        if r.id.is_empty() {
            return Err(Error::InvalidParameter("empty id".into()));
        }
        Ok(GeoTextRecord {
            location: GeoPoint::new(r.lat, r.lon)?,
            id: r.id,
            text: r.text,
            title: r.title,
        })
    }
}

impl From<GeoTextRecord> for RawRecord {
    fn from(r: GeoTextRecord) -> Self {
        RawRecord {
            id: r.id,
            text: r.text,
            lat: r.location.lat(),
            lon: r.location.lon(),
            title: r.title,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<GeoTextRecord>,
    pub provenance: String,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids.
    pub fn new(records: Vec<GeoTextRecord>, provenance: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Dataset {
            records,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Featurizes every record with hashed n-grams.
    pub fn hashed_examples(&self, cfg: &FeaturizerConfig) -> Result<Vec<Example>> {
        cfg.validate()?;
        Ok(self
            .records
            .iter()
            .map(|r| Example::new(featurize(&r.text, cfg), r.location))
            .collect())
    }

    /// Looks up every record's vector in a precomputed embedding table.
    pub fn embedded_examples(&self, table: &HashMap<String, FeatureVector>) -> Result<Vec<Example>> {
        self.records
            .iter()
            .map(|r| {
                let f = table
                    .get(&r.id)
                    .ok_or_else(|| Error::InvalidParameter(format!("no embedding for id {:?}", r.id)))?;
                Ok(Example::new(f.clone(), r.location))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseReport {
    pub dataset: Dataset,
    /// Malformed lines dropped in lenient mode.
    pub skipped: usize,
}

pub fn parse_jsonl(path: impl AsRef<Path>, mode: ParseMode) -> Result<ParseReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl_str(&text, path, mode)
}

pub fn parse_jsonl_str(text: &str, path: &Path, mode: ParseMode) -> Result<ParseReport> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<GeoTextRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => match mode {
                ParseMode::Strict => {
                    return Err(Error::MalformedRow {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        reason: e.to_string(),
                    })
                }
                ParseMode::Lenient => {
                    log::warn!("{}:{}: skipping malformed row: {e}", path.display(), idx + 1);
                    skipped += 1;
                }
            },
        }
    }
    Ok(ParseReport {
        dataset: Dataset::new(records, path.display().to_string())?,
        skipped,
    })
}

pub fn write_jsonl(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in &d.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Partition sizes for `n` records: train and validation are floored,
/// the remainder goes to test.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    if n < 3 {
        return Err(Error::Empty(format!("cannot split {n} records three ways")));
    }
    let train = ((n as f64) * a + SPLIT_EPS).floor() as usize;
    let val = ((n as f64) * b + SPLIT_EPS).floor() as usize;
    let train = train.min(n);
    let val = val.min(n - train);
    Ok((train, val, n - train - val))
}

/// Seeded shuffle followed by a contiguous train/validation/test partition.
pub fn split(d: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (n_train, n_val, _) = split_sizes(d.len(), fractions)?;
    let mut records = d.records.clone();
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = records.split_off(n_train + n_val);
    let val = records.split_off(n_train);
    let part = |records, name: &str| Dataset {
        records,
        provenance: format!("{} [{name}, seed {seed}]", d.provenance),
    };
    Ok((part(records, "train"), part(val, "val"), part(test, "test")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, lat: f64, lon: f64) -> GeoTextRecord {
        GeoTextRecord {
            id: id.into(),
            text: format!("text for {id}"),
            location: GeoPoint::new(lat, lon).unwrap(),
            title: None,
        }
    }

    fn parse(s: &str, mode: ParseMode) -> Result<ParseReport> {
        parse_jsonl_str(s, Path::new("corpus.jsonl"), mode)
    }

    #[test]
    fn parses_valid_lines() {
        let s = r#"{"id":"a","text":"x","lat":1,"lon":2}
{"id":"b","text":"y","lat":-3.5,"lon":170,"title":"B"}

{"id":"c","text":"","lat":0,"lon":0}
"#;
        let r = parse(s, ParseMode::Strict).unwrap();
        assert_eq!(r.dataset.len(), 3);
        assert_eq!(r.skipped, 0);
        assert_eq!(r.dataset.records[1].title.as_deref(), Some("B"));
    }

    #[test]
    fn out_of_range_latitude() {
        let s = "{\"id\":\"a\",\"text\":\"x\",\"lat\":1,\"lon\":2}\n{\"id\":\"b\",\"text\":\"x\",\"lat\":95,\"lon\":2}\n";
        let err = parse(s, ParseMode::Strict).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("corpus.jsonl:2"));
        let r = parse(s, ParseMode::Lenient).unwrap();
        assert_eq!((r.dataset.len(), r.skipped), (1, 1));
    }

    #[test]
    fn duplicate_id_rejected() {
        let s = "{\"id\":\"a\",\"text\":\"x\",\"lat\":1,\"lon\":2}\n{\"id\":\"a\",\"text\":\"y\",\"lat\":1,\"lon\":2}\n";
        for mode in [ParseMode::Strict, ParseMode::Lenient] {
            assert!(matches!(parse(s, mode), Err(Error::DuplicateId(ref id)) if id == "a"));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut records = vec![rec("1", 10.0, 20.0), rec("2", -89.9, -179.5)];
        records[0].title = Some("Ünïcode \"quoted\"\ttab".into());
        records[1].text = "line\nbreak".into();
        let d = Dataset::new(records, "test").unwrap();
        write_jsonl(&d, &path).unwrap();
        let back = parse_jsonl(&path, ParseMode::Strict).unwrap().dataset;
        assert_eq!(back.records, d.records);
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(100, (0.98, 0.01, 0.01)).unwrap(), (98, 1, 1));
        let n = 1_286_475usize;
        let f = (1_260_746.0 / n as f64, 12_864.0 / n as f64, 12_865.0 / n as f64);
        assert_eq!(split_sizes(n, f).unwrap(), (1_260_746, 12_864, 12_865));
        assert!(split_sizes(2, (0.5, 0.25, 0.25)).is_err());
        assert!(split_sizes(10, (0.5, 0.5, 0.5)).is_err());
        assert!(split_sizes(10, (1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let d = Dataset::new((0..100).map(|i| rec(&i.to_string(), 0.0, 0.0)).collect(), "syn").unwrap();
        let (a, b, c) = split(&d, (0.98, 0.01, 0.01), 5).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (98, 1, 1));
        let mut ids: Vec<&str> = a.records.iter().chain(&b.records).chain(&c.records).map(|r| r.id.as_str()).collect();
        ids.sort();
        let mut orig: Vec<&str> = d.records.iter().map(|r| r.id.as_str()).collect();
        orig.sort();
        assert_eq!(ids, orig);
        let again = split(&d, (0.98, 0.01, 0.01), 5).unwrap();
        assert_eq!(again.0.records, a.records);
        assert_eq!(again.2.records, c.records);
        assert_ne!(split(&d, (0.98, 0.01, 0.01), 6).unwrap().0.records, a.records);
    }

    #[test]
    fn embedded_examples_need_every_id() {
        let d = Dataset::new(vec![rec("a", 0.0, 0.0), rec("b", 0.0, 0.0)], "t").unwrap();
        let mut table = HashMap::new();
        table.insert("a".to_string(), FeatureVector(vec![1.0, 0.0]));
        assert!(d.embedded_examples(&table).is_err());
        table.insert("b".to_string(), FeatureVector(vec![0.0, 1.0]));
        assert_eq!(d.embedded_examples(&table).unwrap().len(), 2);
    }
}
