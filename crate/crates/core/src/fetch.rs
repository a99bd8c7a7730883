//! Client for MediaWiki-style article APIs: pages with intro extracts and
//! primary coordinates, paged with a continuation token.

use std::fs;
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::ingest::{Dataset, GeoTextRecord};
use crate::sphere::GeoPoint;

#[derive(Debug, Clone)]
pub struct FetchConfig {
    /// API URL, e.g. `https://en.wikipedia.org/w/api.php`.
    pub endpoint: String,
    /// Maximum number of records to return.
    pub limit: usize,
    /// Requests per second.
    pub rate: f64,
    /// Pages requested per call.
    pub batch: usize,
    /// Holds the continuation token between runs.
    pub cursor_path: Option<PathBuf>,
    pub max_attempts: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
    pub timeout: Duration,
}

impl FetchConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        FetchConfig {
            endpoint: endpoint.into(),
            limit: 1000,
            rate: 1.0,
            batch: 20,
            cursor_path: None,
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchReport {
    pub dataset: Dataset,
    /// Pages dropped for lacking an extract or Earth coordinates.
    pub skipped: usize,
    pub requests: usize,
    pub retries: usize,
    /// Batches abandoned after exhausting retries.
    pub failed: usize,
}

fn read_cursor(cfg: &FetchConfig) -> Result<Option<String>> {
    let Some(path) = &cfg.cursor_path else {
        return Ok(None);
    };
    match fs::read_to_string(path) {
        Ok(s) if !s.trim().is_empty() => Ok(Some(s.trim().to_string())),
        Ok(_) => Ok(None),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn write_cursor(cfg: &FetchConfig, token: Option<&str>) -> Result<()> {
    if let Some(path) = &cfg.cursor_path {
        fs::write(path, token.unwrap_or("")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn query_url(cfg: &FetchConfig, token: Option<&str>) -> String {
    let mut url = format!(
        "{}?action=query&format=json&formatversion=2&generator=allpages&gapnamespace=0&gaplimit={}\
         &prop=extracts%7Ccoordinates&exintro=1&explaintext=1&exlimit=max&coprimary=primary&colimit=max",
        cfg.endpoint, cfg.batch
    );
    if let Some(t) = token {
        url.push_str("&gapcontinue=");
        url.push_str(&encode(t));
    }
    url
}

fn encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-_.~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// Turns one page object into a record, or `None` when it has no usable
/// extract or Earth coordinates.
fn page_record(page: &Value) -> Option<GeoTextRecord> {
    let id = match &page["pageid"] {
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        _ => return None,
    };
    let text = page["extract"].as_str().filter(|t| !t.trim().is_empty())?;
    let coords = page["coordinates"].as_array()?;
    let c = coords
        .iter()
        .find(|c| c.get("primary").is_some())
        .or_else(|| coords.first())?;
    let globe = c["globe"].as_str().unwrap_or("earth");
    if !globe.eq_ignore_ascii_case("earth") {
        return None;
    }
    let location = GeoPoint::new(c["lat"].as_f64()?, c["lon"].as_f64()?).ok()?;
    Some(GeoTextRecord {
        id,
        text: text.to_string(),
        location,
        title: page["title"].as_str().map(str::to_string),
    })
}

fn pages(body: &Value) -> Vec<&Value> {
    match &body["query"]["pages"] {
        Value::Array(a) => a.iter().collect(),
        Value::Object(o) => o.values().collect(),
        _ => Vec::new(),
    }
}

/// Pages through the API until `limit` records are collected or the listing
/// ends. The cursor file, when configured, is read at start and rewritten
/// after every fully consumed batch.
pub fn fetch_geo_articles(cfg: &FetchConfig) -> Result<FetchReport> {
    let mut report = FetchReport {
        dataset: Dataset {
            records: Vec::new(),
            provenance: format!("fetched from {}", cfg.endpoint),
        },
        skipped: 0,
        requests: 0,
        retries: 0,
        failed: 0,
    };
    if cfg.limit == 0 {
        return Ok(report);
    }
    if cfg.rate.is_nan() || cfg.rate <= 0.0 || cfg.batch == 0 || cfg.max_attempts == 0 {
        return Err(Error::InvalidParameter("rate, batch and attempts must be positive".into()));
    }
    let agent = ureq::Agent::new_with_config(
        ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .build(),
    );
    let interval = Duration::from_secs_f64(1.0 / cfg.rate);
    let mut last_request: Option<Instant> = None;
    let mut token = read_cursor(cfg)?;
    let mut seen = std::collections::HashSet::new();

    'pages: loop {
        let url = query_url(cfg, token.as_deref());
        let mut body = None;
        for attempt in 1..=cfg.max_attempts {
            if let Some(t) = last_request {
                let wait = interval.saturating_sub(t.elapsed());
                thread::sleep(wait);
            }
            last_request = Some(Instant::now());
            report.requests += 1;
            let result = agent
                .get(&url)
                .header("User-Agent", concat!("geovmf/", env!("CARGO_PKG_VERSION")))
                .call()
                .and_then(|mut r| r.body_mut().read_to_string());
            match result {
                Ok(text) => match serde_json::from_str::<Value>(&text) {
                    Ok(v) => {
                        body = Some(v);
                        break;
                    }
                    Err(e) => log::warn!("attempt {attempt}: unparseable response: {e}"),
                },
                Err(e) => log::warn!("attempt {attempt}: request failed: {e}"),
            }
            if attempt < cfg.max_attempts {
                report.retries += 1;
                let delay = cfg.backoff * 2u32.pow(attempt - 1);
                log::info!("retrying in {delay:?}");
                thread::sleep(delay);
            }
        }
        let Some(body) = body else {
            report.failed += 1;
            log::error!("giving up on batch after {} attempts", cfg.max_attempts);
            break;
        };

        let batch = pages(&body);
        for (n, page) in batch.iter().enumerate() {
            match page_record(page) {
                Some(r) if seen.insert(r.id.clone()) => {
                    report.dataset.records.push(r);
                    if report.dataset.records.len() >= cfg.limit {
                        // keep the cursor on a partly consumed batch
                        if n + 1 == batch.len() {
                            token = body["continue"]["gapcontinue"].as_str().map(str::to_string);
                            write_cursor(cfg, token.as_deref())?;
                        }
                        break 'pages;
                    }
                }
                Some(_) => {}
                None => report.skipped += 1,
            }
        }
        token = body["continue"]["gapcontinue"].as_str().map(str::to_string);
        write_cursor(cfg, token.as_deref())?;
        if token.is_none() {
            break;
        }
    }
    log::info!(
        "fetched {} records ({} skipped, {} retries)",
        report.dataset.records.len(),
        report.skipped,
        report.retries
    );
    Ok(report)
}
