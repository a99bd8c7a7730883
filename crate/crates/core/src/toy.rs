//! A synthetic corpus: short texts that each name one of four far-apart
//! cities, located near that city's centre.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ingest::{Dataset, GeoTextRecord};
use crate::sphere::{normalize_lon, GeoPoint};

/// (name, lat, lon)
pub const CITIES: [(&str, f64, f64); 4] = [
    ("Reykjavik", 64.1466, -21.9426),
    ("Nairobi", -1.2921, 36.8219),
    ("Sapporo", 43.0618, 141.3545),
    ("Santiago", -33.4489, -70.6693),
];

pub const RECORDS_PER_CITY: usize = 200;

/// Maximum displacement of a record from its city centre, in degrees.
const JITTER_DEG: f64 = 0.15;

const TEMPLATES: [&str; 8] = [
    "{} is a city.",
    "The museum in {} opened last spring.",
    "A small bakery near the harbour of {}.",
    "She grew up in {} and later moved away.",
    "Weather report for {} this weekend.",
    "The old railway station of {}.",
    "{} hosts an annual music festival.",
    "A park on the edge of {}.",
];

/// Generates `per_city` records for each of [`CITIES`], interleaved and
/// deterministic in `seed`.
pub fn corpus(per_city: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(per_city * CITIES.len());
    for i in 0..per_city {
        for (c, (name, lat, lon)) in CITIES.iter().enumerate() {
            let template = TEMPLATES.choose(&mut rng).expect("non-empty");
            let text = template.replace("{}", name);
            let location = GeoPoint::new(
                lat + rng.random_range(-JITTER_DEG..JITTER_DEG),
                normalize_lon(lon + rng.random_range(-JITTER_DEG..JITTER_DEG)),
            )?;
            records.push(GeoTextRecord {
                id: format!("toy-{c}-{i:04}"),
                text,
                location,
                title: Some((*name).to_string()),
            });
        }
    }
    Dataset::new(records, format!("synthetic four-city corpus, seed {seed}"))
}
