//! Scoring predictions against gold coordinates, in kilometres.
//!
//! A prediction is a model mixture, a list of external candidates with
//! optional scores, or missing. Each is collapsed to one point by a
//! [`PointRule`], scored by haversine distance, and summarized by mean and
//! median with bootstrap standard errors.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::fnv1a;
use crate::ingest::Dataset;
use crate::mixture::{point_estimate_with, ComponentRecord, PointRule, VmfMixture};
use crate::sphere::{cart_to_geo, haversine_km, GeoPoint};
use crate::stats::{bootstrap_se, mean, median};

pub const DEFAULT_BOOTSTRAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(flatten)]
    pub point: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Mixture(VmfMixture),
    Candidates(Vec<Candidate>),
    Missing,
}

impl Prediction {
    pub fn is_missing(&self) -> bool {
        matches!(self, Prediction::Missing)
    }

    /// Every point this prediction could resolve to.
    pub fn points(&self) -> Result<Vec<GeoPoint>> {
        match self {
            Prediction::Mixture(m) => m.components().iter().map(|c| cart_to_geo(c.mu)).collect(),
            Prediction::Candidates(c) => Ok(c.iter().map(|c| c.point).collect()),
            Prediction::Missing => Ok(Vec::new()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    pub model: String,
    pub predictions: HashMap<String, Prediction>,
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    candidates: Option<Vec<Candidate>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    components: Option<Vec<ComponentRecord>>,
}

impl PredictionSet {
    pub fn new(model: impl Into<String>) -> Self {
        PredictionSet {
            model: model.into(),
            predictions: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, p: Prediction) -> Result<()> {
        let id = id.into();
        if let Prediction::Candidates(c) = &p {
            if c.is_empty() {
                return Err(Error::Empty(format!("candidate list for {id:?}")));
            }
        }
        if self.predictions.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.predictions.insert(id, p);
        Ok(())
    }

    /// Reads prediction JSONL. Each line carries an `id` and either
    /// `candidates` (external geocoder) or `components` (mixture); an empty
    /// or absent list marks the id as missing.
    pub fn read_jsonl(path: impl AsRef<Path>, model: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut set = PredictionSet::new(model);
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: String| Error::MalformedRow {
                path: path.to_path_buf(),
                line: idx + 1,
                reason,
            };
            let row: PredictionLine = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            let pred = match (row.candidates, row.components) {
                (Some(_), Some(_)) => return Err(malformed("both candidates and components given".into())),
                (Some(c), None) if !c.is_empty() => {
                    if c.iter().any(|c| c.score.is_some_and(|s| !s.is_finite())) {
                        return Err(malformed("non-finite score".into()));
                    }
                    Prediction::Candidates(c)
                }
                (None, Some(c)) if !c.is_empty() => {
                    Prediction::Mixture(VmfMixture::from_records(&c).map_err(|e| malformed(e.to_string()))?)
                }
                _ => Prediction::Missing,
            };
            set.insert(row.id, pred)?;
        }
        Ok(set)
    }

    /// Writes one line per id, sorted by id.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut ids: Vec<&String> = self.predictions.keys().collect();
        ids.sort();
        for id in ids {
            let (candidates, components) = match &self.predictions[id] {
                Prediction::Mixture(m) => (None, Some(m.to_records())),
                Prediction::Candidates(c) => (Some(c.clone()), None),
                Prediction::Missing => (Some(Vec::new()), None),
            };
            let line = PredictionLine {
                id: id.clone(),
                candidates,
                components,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Index of the highest score, ties to the first. `None` when no candidate
/// carries a score.
fn argmax_score(c: &[Candidate]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in c.iter().enumerate().filter_map(|(i, c)| c.score.map(|s| (i, s))) {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

fn nearest(points: &[GeoPoint], truth: GeoPoint) -> Result<GeoPoint> {
    points
        .iter()
        .copied()
        .min_by(|a, b| haversine_km(*a, truth).total_cmp(&haversine_km(*b, truth)))
        .ok_or_else(|| Error::Empty("candidate list".into()))
}

fn resolve_with<R: Rng + ?Sized>(pred: &Prediction, truth: GeoPoint, rule: PointRule, rng: &mut R) -> Result<GeoPoint> {
    match pred {
        Prediction::Missing => Err(Error::InvalidParameter("cannot resolve a missing prediction".into())),
        Prediction::Mixture(m) => match rule {
            PointRule::Best => nearest(&pred.points()?, truth),
            _ => point_estimate_with(m, rule, rng),
        },
        Prediction::Candidates(c) => {
            if c.is_empty() {
                return Err(Error::Empty("candidate list".into()));
            }
            let i = match rule {
                PointRule::HighProb => argmax_score(c).unwrap_or(0),
                PointRule::Best => return nearest(&pred.points()?, truth),
                PointRule::Random => rng.random_range(0..c.len()),
                PointRule::RandomWeighted => weighted_index(c, rng),
            };
            Ok(c[i].point)
        }
    }
}

/// Draw proportional to score when every score is present and
/// non-negative with a positive total; uniform otherwise.
fn weighted_index<R: Rng + ?Sized>(c: &[Candidate], rng: &mut R) -> usize {
    let scores: Option<Vec<f64>> = c.iter().map(|c| c.score.filter(|s| *s >= 0.0)).collect();
    let Some(scores) = scores.filter(|s| s.iter().sum::<f64>() > 0.0) else {
        return rng.random_range(0..c.len());
    };
    let total: f64 = scores.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, s) in scores.iter().enumerate() {
        acc += s;
        if u < acc {
            return i;
        }
    }
    scores.iter().rposition(|s| *s > 0.0).unwrap_or(0)
}

/// Collapses one prediction to a point. `seed` drives the random rules.
pub fn resolve(pred: &Prediction, truth: GeoPoint, rule: PointRule, seed: u64) -> Result<GeoPoint> {
    resolve_with(pred, truth, rule, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Missing predictions are scored as (0, 0).
    #[default]
    Imputed,
    /// Missing predictions are dropped.
    CompleteCases,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imputed" => Ok(EvalMode::Imputed),
            "complete_cases" | "complete-cases" => Ok(EvalMode::CompleteCases),
            other => Err(Error::InvalidParameter(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservationError {
    pub id: String,
    pub km: f64,
    pub imputed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub rule: PointRule,
    pub mode: EvalMode,
    pub n: usize,
    pub mean_km: f64,
    pub median_km: f64,
    pub se_mean_km: f64,
    pub se_median_km: f64,
    /// Gold ids without a prediction: imputed in `Imputed` mode, dropped in
    /// `CompleteCases` mode.
    pub missing: usize,
    pub bootstrap_reps: usize,
    pub seed: u64,
    /// Set when highProb fell back to the first candidate because scores
    /// were absent.
    pub highprob_unscored: bool,
}

impl EvalReport {
    /// Row label: the model name, plus the mode when cases were dropped.
    pub fn label(&self) -> String {
        match self.mode {
            EvalMode::Imputed => self.model.clone(),
            EvalMode::CompleteCases => format!("{} Complete Cases", self.model),
        }
    }
}

/// Seed for one record's random choices, independent of record order.
pub fn record_seed(seed: u64, id: &str) -> u64 {
    seed ^ fnv1a(id.as_bytes(), 0)
}

/// Per-observation errors in gold order. Random rules draw from a stream
/// seeded by `seed` and the record id, so results do not depend on order.
pub fn observation_errors(
    preds: &PredictionSet,
    gold: &Dataset,
    rule: PointRule,
    mode: EvalMode,
    seed: u64,
) -> Result<Vec<ObservationError>> {
    if !gold.records.iter().any(|r| preds.predictions.contains_key(&r.id)) {
        return Err(Error::NoOverlap);
    }
    let origin = GeoPoint::new(0.0, 0.0)?;
    let mut out = Vec::with_capacity(gold.len());
    for r in &gold.records {
        let pred = preds.predictions.get(&r.id).unwrap_or(&Prediction::Missing);
        if pred.is_missing() {
            if mode == EvalMode::Imputed {
                out.push(ObservationError {
                    id: r.id.clone(),
                    km: haversine_km(origin, r.location),
                    imputed: true,
                });
            }
            continue;
        }
        let p = resolve(pred, r.location, rule, record_seed(seed, &r.id))?;
        out.push(ObservationError {
            id: r.id.clone(),
            km: haversine_km(p, r.location),
            imputed: false,
        });
    }
    Ok(out)
}

pub fn evaluate(preds: &PredictionSet, gold: &Dataset, rule: PointRule, mode: EvalMode, seed: u64) -> Result<EvalReport> {
    evaluate_with(preds, gold, rule, mode, seed, DEFAULT_BOOTSTRAP)
}

pub fn evaluate_with(
    preds: &PredictionSet,
    gold: &Dataset,
    rule: PointRule,
    mode: EvalMode,
    seed: u64,
    bootstrap_reps: usize,
) -> Result<EvalReport> {
    if bootstrap_reps < 2 {
        return Err(Error::InvalidParameter(format!(
            "bootstrap needs at least 2 resamples, got {bootstrap_reps}"
        )));
    }
    let obs = observation_errors(preds, gold, rule, mode, seed)?;
    if obs.is_empty() {
        return Err(Error::Empty("no scored observations".into()));
    }
    let missing = gold
        .records
        .iter()
        .filter(|r| preds.predictions.get(&r.id).is_none_or(Prediction::is_missing))
        .count();
    let highprob_unscored = rule == PointRule::HighProb
        && gold.records.iter().any(|r| {
            matches!(preds.predictions.get(&r.id), Some(Prediction::Candidates(c)) if argmax_score(c).is_none() && c.len() > 1)
        });
    let km: Vec<f64> = obs.iter().map(|o| o.km).collect();
    Ok(EvalReport {
        model: preds.model.clone(),
        rule,
        mode,
        n: km.len(),
        mean_km: mean(&km),
        median_km: median(&km),
        se_mean_km: bootstrap_se(&km, mean, bootstrap_reps, seed),
        se_median_km: bootstrap_se(&km, median, bootstrap_reps, seed.wrapping_add(1)),
        missing,
        bootstrap_reps,
        seed,
        highprob_unscored,
    })
}

const RULE_ORDER: [PointRule; 4] = [
    PointRule::HighProb,
    PointRule::Best,
    PointRule::Random,
    PointRule::RandomWeighted,
];

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Text table with one row per model label, Mean/Median per rule, and
/// bootstrap standard errors in parentheses beneath.
pub fn format_table(reports: &[EvalReport]) -> String {
    let rules: Vec<PointRule> = RULE_ORDER
        .into_iter()
        .filter(|r| reports.iter().any(|rep| rep.rule == *r))
        .collect();
    let mut labels: Vec<String> = Vec::new();
    let mut cells: HashMap<(String, PointRule), &EvalReport> = HashMap::new();
    for r in reports {
        let label = r.label();
        if !labels.contains(&label) {
            labels.push(label.clone());
        }
        cells.insert((label, r.rule), r);
    }
    let lw = labels.iter().map(String::len).max().unwrap_or(0).max("Model".len());
    let nw = 8;
    let cw = 9;

    let mut s = String::new();
    let _ = write!(s, "{:lw$} | {:>nw$}", "", "");
    for r in &rules {
        let _ = write!(s, " | {:^w$}", r.name(), w = 2 * cw + 1);
    }
    s.push('\n');
    let _ = write!(s, "{:lw$} | {:>nw$}", "Model", "n");
    for _ in &rules {
        let _ = write!(s, " | {:>cw$} {:>cw$}", "Mean", "Median");
    }
    s.push('\n');
    let _ = write!(s, "{}-+-{}", "-".repeat(lw), "-".repeat(nw));
    for _ in &rules {
        let _ = write!(s, "-+-{}", "-".repeat(2 * cw + 1));
    }
    s.push('\n');

    for label in &labels {
        let n = rules
            .iter()
            .find_map(|r| cells.get(&(label.clone(), *r)))
            .map(|r| thousands(r.n))
            .unwrap_or_default();
        let _ = write!(s, "{label:lw$} | {n:>nw$}");
        for r in &rules {
            match cells.get(&(label.clone(), *r)) {
                Some(c) => {
                    let _ = write!(s, " | {:>cw$.1} {:>cw$.1}", c.mean_km, c.median_km);
                }
                None => {
                    let _ = write!(s, " | {:>cw$} {:>cw$}", "-", "-");
                }
            }
        }
        s.push('\n');
        let _ = write!(s, "{:lw$} | {:>nw$}", "", "");
        for r in &rules {
            match cells.get(&(label.clone(), *r)) {
                Some(c) => {
                    let _ = write!(
                        s,
                        " | {:>cw$} {:>cw$}",
                        format!("({:.1})", c.se_mean_km),
                        format!("({:.1})", c.se_median_km)
                    );
                }
                None => {
                    let _ = write!(s, " | {:>cw$} {:>cw$}", "", "");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// One cell group of a parsed table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub rule: PointRule,
    pub mean_km: f64,
    pub median_km: f64,
    pub se_mean_km: f64,
    pub se_median_km: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub n: usize,
    pub cells: Vec<TableCell>,
}

/// Parses the output of [`format_table`].
pub fn parse_table(s: &str) -> Result<Vec<TableRow>> {
    let bad = |what: &str| Error::InvalidParameter(format!("unparseable table: {what}"));
    let mut lines = s.lines();
    let header = lines.next().ok_or_else(|| bad("empty"))?;
    let rules: Vec<PointRule> = header
        .split('|')
        .skip(2)
        .map(|r| r.trim().parse())
        .collect::<Result<_>>()?;
    lines.next();
    lines.next();
    let num = |t: &str| -> Result<Option<f64>> {
        let t = t.trim().trim_start_matches('(').trim_end_matches(')');
        if t == "-" || t.is_empty() {
            return Ok(None);
        }
        t.parse().map(Some).map_err(|_| bad(t))
    };
    let mut rows = Vec::new();
    while let Some(main) = lines.next() {
        let se = lines.next().ok_or_else(|| bad("missing standard-error row"))?;
        let mf: Vec<&str> = main.split('|').collect();
        let sf: Vec<&str> = se.split('|').collect();
        if mf.len() != rules.len() + 2 || sf.len() != rules.len() + 2 {
            return Err(bad("column count"));
        }
        let n = mf[1].trim().replace(',', "").parse().map_err(|_| bad(mf[1]))?;
        let mut cells = Vec::new();
        for (i, rule) in rules.iter().enumerate() {
            let m: Vec<&str> = mf[i + 2].split_whitespace().collect();
            let e: Vec<&str> = sf[i + 2].split_whitespace().collect();
            if m.len() != 2 {
                return Err(bad(mf[i + 2]));
            }
            if let (Some(mean_km), Some(median_km)) = (num(m[0])?, num(m[1])?) {
                if e.len() != 2 {
                    return Err(bad(sf[i + 2]));
                }
                cells.push(TableCell {
                    rule: *rule,
                    mean_km,
                    median_km,
                    se_mean_km: num(e[0])?.ok_or_else(|| bad(e[0]))?,
                    se_median_km: num(e[1])?.ok_or_else(|| bad(e[1]))?,
                });
            }
        }
        rows.push(TableRow {
            label: mf[0].trim().to_string(),
            n,
            cells,
        });
    }
    Ok(rows)
}
