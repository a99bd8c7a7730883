//! Finite mixtures of vMF components, the two training losses, and point
//! predictions.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{cart_to_geo, geo_to_cart, GeoPoint, UnitVec3};
use crate::vmf::{self, VmfComponent};

/// Default number of mixture components.
pub const DEFAULT_COMPONENTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct VmfMixture {
    components: Vec<VmfComponent>,
    rho: Vec<f64>,
}

impl VmfMixture {
    /// Builds a mixture; weights must be nonnegative and sum to 1 within 1e-9.
    pub fn new(components: Vec<VmfComponent>, rho: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidParameter("mixture has no components".into()));
        }
        if components.len() != rho.len() {
            return Err(Error::LengthMismatch {
                expected: components.len(),
                actual: rho.len(),
            });
        }
        if rho.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mixing weights must be finite and nonnegative: {rho:?}"
            )));
        }
        let total: f64 = rho.iter().sum();
        if total == 0.0 {
            return Err(Error::InvalidParameter("all mixing weights are zero".into()));
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "mixing weights sum to {total}, not 1"
            )));
        }
        Ok(VmfMixture { components, rho })
    }

    pub fn single(c: VmfComponent) -> Self {
        VmfMixture {
            components: vec![c],
            rho: vec![1.0],
        }
    }

    pub fn components(&self) -> &[VmfComponent] {
        &self.components
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Index of the largest weight; ties go to the lowest index.
    pub fn argmax_rho(&self) -> usize {
        let mut best = 0;
        for (k, &r) in self.rho.iter().enumerate().skip(1) {
            if r > self.rho[best] {
                best = k;
            }
        }
        best
    }

    pub fn log_density(&self, x: UnitVec3) -> f64 {
        mixture_log_density(x, self)
    }
}

/// `log Σ_k ρ_k f(x; μ_k, κ_k)`, evaluated with log-sum-exp.
pub fn mixture_log_density(x: UnitVec3, m: &VmfMixture) -> f64 {
    log_sum_exp(
        m.components
            .iter()
            .zip(&m.rho)
            .filter(|(_, &r)| r > 0.0)
            .map(|(c, &r)| r.ln() + c.log_density(x)),
    )
}

pub(crate) fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Which training objective to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `-Σ_k ρ_k log f_k`: weighted sum of component log-likelihoods.
    WeightedNll,
    /// `-log Σ_k ρ_k f_k`: the mixture negative log-likelihood.
    #[default]
    MixtureNll,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted_nll" => Ok(LossKind::WeightedNll),
            "mixture_nll" | "nll" => Ok(LossKind::MixtureNll),
            other => Err(Error::InvalidParameter(format!("unknown loss `{other}`"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::WeightedNll => "weighted_nll",
            LossKind::MixtureNll => "mixture_nll",
        })
    }
}

/// Per-observation loss under `kind`.
pub fn observation_loss(y: UnitVec3, m: &VmfMixture, kind: LossKind) -> f64 {
    match kind {
        LossKind::WeightedNll => -m
            .components
            .iter()
            .zip(&m.rho)
            .map(|(c, &r)| if r == 0.0 { 0.0 } else { r * c.log_density(y) })
            .sum::<f64>(),
        LossKind::MixtureNll => -mixture_log_density(y, m),
    }
}

fn batch_loss(targets: &[UnitVec3], mixtures: &[VmfMixture], kind: LossKind) -> Result<f64> {
    if targets.len() != mixtures.len() {
        return Err(Error::LengthMismatch {
            expected: targets.len(),
            actual: mixtures.len(),
        });
    }
    Ok(targets
        .iter()
        .zip(mixtures)
        .map(|(y, m)| observation_loss(*y, m, kind))
        .sum())
}

/// `-Σ_i Σ_k ρ_ik log f(y_i; μ_ik, κ_ik)` with per-observation weights.
///
/// By Jensen's inequality this is never below [`mixture_nll`].
pub fn weighted_nll(targets: &[UnitVec3], mixtures: &[VmfMixture]) -> Result<f64> {
    batch_loss(targets, mixtures, LossKind::WeightedNll)
}

/// `-Σ_i log Σ_k ρ_ik f(y_i; μ_ik, κ_ik)`.
pub fn mixture_nll(targets: &[UnitVec3], mixtures: &[VmfMixture]) -> Result<f64> {
    batch_loss(targets, mixtures, LossKind::MixtureNll)
}

/// Rule for collapsing a multi-candidate prediction to a single point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointRule {
    /// The candidate with the largest weight or score.
    #[serde(rename = "highProb")]
    HighProb,
    /// The candidate nearest the truth. Needs the answer, so only for evaluation.
    #[serde(rename = "best")]
    Best,
    /// A seeded uniform draw over candidates.
    #[serde(rename = "random")]
    Random,
    /// A seeded draw over mixture components proportional to ρ.
    #[serde(rename = "randomWeighted")]
    RandomWeighted,
}

impl PointRule {
    pub fn name(&self) -> &'static str {
        match self {
            PointRule::HighProb => "highProb",
            PointRule::Best => "best",
            PointRule::Random => "random",
            PointRule::RandomWeighted => "randomWeighted",
        }
    }
}

impl FromStr for PointRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highProb" | "highprob" | "high_prob" => Ok(PointRule::HighProb),
            "best" => Ok(PointRule::Best),
            "random" => Ok(PointRule::Random),
            "randomWeighted" | "random_weighted" => Ok(PointRule::RandomWeighted),
            other => Err(Error::InvalidParameter(format!("unknown rule `{other}`"))),
        }
    }
}

impl fmt::Display for PointRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub(crate) fn pick_component<R: Rng + ?Sized>(m: &VmfMixture, weighted: bool, rng: &mut R) -> usize {
    if !weighted {
        return rng.random_range(0..m.len());
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &r) in m.rho.iter().enumerate() {
        if r > 0.0 {
            last_positive = k;
        }
        acc += r;
        if u < acc {
            return k;
        }
    }
    last_positive
}

/// Collapses a mixture to one point under a target-free rule.
///
/// `Best` needs a reference point and is rejected here; see the evaluation
/// harness for it.
pub fn point_estimate(m: &VmfMixture, rule: PointRule, seed: u64) -> Result<GeoPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    point_estimate_with(m, rule, &mut rng)
}

pub(crate) fn point_estimate_with<R: Rng + ?Sized>(
    m: &VmfMixture,
    rule: PointRule,
    rng: &mut R,
) -> Result<GeoPoint> {
    let k = match rule {
        PointRule::HighProb => m.argmax_rho(),
        PointRule::Random => pick_component(m, false, rng),
        PointRule::RandomWeighted => pick_component(m, true, rng),
        PointRule::Best => {
            return Err(Error::InvalidParameter(
                "the best rule needs the true location".into(),
            ))
        }
    };
    cart_to_geo(m.components[k].mu)
}

/// Ancestral sampling: pick a component by ρ, then draw from it.
pub fn sample_mixture(m: &VmfMixture, n: usize, seed: u64) -> Vec<UnitVec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = pick_component(m, true, &mut rng);
            vmf::draw(&m.components[k], &mut rng)
        })
        .collect()
}

/// One component as written to prediction files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub lat: f64,
    pub lon: f64,
    pub kappa: f64,
    pub rho: f64,
}

impl VmfMixture {
    pub fn to_records(&self) -> Vec<ComponentRecord> {
        self.components
            .iter()
            .zip(&self.rho)
            .map(|(c, &rho)| {
                // mu is unit by construction
                let p = cart_to_geo(c.mu).expect("unit mean direction");
                ComponentRecord {
                    lat: p.lat(),
                    lon: p.lon(),
                    kappa: c.kappa,
                    rho,
                }
            })
            .collect()
    }

    pub fn from_records(records: &[ComponentRecord]) -> Result<Self> {
        let components = records
            .iter()
            .map(|r| VmfComponent::new(geo_to_cart(GeoPoint::new(r.lat, r.lon)?), r.kappa))
            .collect::<Result<Vec<_>>>()?;
        VmfMixture::new(components, records.iter().map(|r| r.rho).collect())
    }
}
