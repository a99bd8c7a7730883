//! Minibatch Adam training of the mixture head.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::head::{accumulate_gradient, backward, forward, observation_loss, HeadDims, HeadParams};
use crate::mixture::LossKind;
use crate::sphere::{cart_to_geo, geo_to_cart, haversine_km, GeoPoint, UnitVec3};
use crate::stats::{mean, median};

/// Tolerance for the weighted_nll ≥ mixture_nll check on each batch.
const JENSEN_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::InvalidParameter(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of applied steps.
    pub t: u64,
    pub skipped: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            skipped: 0,
        }
    }
}

/// One bias-corrected Adam update. A gradient with any non-finite entry
/// leaves parameters and moments untouched, bumps `skipped`, and returns
/// `Ok(false)`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<bool> {
    if grads.len() != params.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            actual: state.m.len(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        log::warn!("skipping optimizer step with non-finite gradient");
        return Ok(false);
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        params[i] -= cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.eps);
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            epochs: 5,
            batch_size: 32,
            loss: LossKind::MixtureNll,
            seed: 42,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// A featurized observation with its gold location.
#[derive(Debug, Clone)]
pub struct Example {
    pub features: FeatureVector,
    pub target: UnitVec3,
}

impl Example {
    pub fn new(features: FeatureVector, location: GeoPoint) -> Self {
        Example {
            features,
            target: geo_to_cart(location),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_mean_km: f64,
    pub val_median_km: f64,
    pub skipped_steps: u64,
    pub jensen_violations: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// Tab-separated log with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tmean_loss\tval_mean_km\tval_median_km\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.3}\t{:.3}",
                e.epoch, e.mean_loss, e.val_mean_km, e.val_median_km
            );
        }
        s
    }
}

/// Great-circle error in km of the highest-weight component's mean for each
/// example.
pub fn high_prob_errors_km(examples: &[Example], w: &HeadParams) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|ex| {
            let m = forward(&ex.features, w)?;
            let mu = m.components()[m.argmax_rho()].mu;
            Ok(haversine_km(cart_to_geo(mu)?, cart_to_geo(ex.target)?))
        })
        .collect()
}

/// Trains from a seeded initialization; see [`train_from`].
pub fn train(
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    dims: HeadDims,
) -> Result<(HeadParams, TrainHistory)> {
    train_from(HeadParams::init(cfg.seed, dims), train_set, val_set, cfg, |_| {})
}

/// Runs `cfg.epochs` epochs of minibatch Adam starting from `params`,
/// calling `on_epoch` after each one. Batch gradients are summed in example
/// order, so results are bit-reproducible for a given seed.
pub fn train_from(
    mut params: HeadParams,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(HeadParams, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let dims = params.dims();
    for ex in train_set.iter().chain(val_set) {
        if ex.features.dim() != dims.input {
            return Err(Error::DimensionMismatch {
                expected: dims.input,
                actual: ex.features.dim(),
            });
        }
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut state = AdamState::new(dims.param_count());
    let mut grad = HeadParams::zeros(dims);
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let skipped_before = state.skipped;
        let mut jensen_violations = 0;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            grad.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            let (mut weighted_nll, mut nll) = (0.0, 0.0);
            for &i in batch {
                let ex = &train_set[i];
                let l = accumulate_gradient(&ex.features, &params, ex.target, cfg.loss, scale, &mut grad)?;
                weighted_nll += l.weighted_nll;
                nll += l.mixture_nll;
            }
            if weighted_nll < nll - JENSEN_SLACK * nll.abs().max(1.0) {
                jensen_violations += 1;
                log::error!("batch violates weighted_nll >= mixture_nll: {weighted_nll} < {nll}");
            }
            let batch_loss = match cfg.loss {
                LossKind::WeightedNll => weighted_nll,
                LossKind::MixtureNll => nll,
            };
            if batch_loss.is_finite() {
                loss_sum += batch_loss;
                loss_count += batch.len();
            }
            adam_step(params.values_mut(), grad.values(), &mut state, &cfg.adam)?;
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("parameters after step {} of epoch {epoch}", state.t)));
            }
        }

        let errors = high_prob_errors_km(val_set, &params)?;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            val_mean_km: mean(&errors),
            val_median_km: median(&errors),
            skipped_steps: state.skipped - skipped_before,
            jensen_violations,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, val mean {:.1} km, median {:.1} km",
            stats.mean_loss,
            stats.val_mean_km,
            stats.val_median_km
        );
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok((params, history))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub dims: String,
    pub cases: usize,
    pub tol: f64,
    pub max_rel_error_weighted_nll: f64,
    pub max_rel_error_nll: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.max_rel_error_weighted_nll.max(self.max_rel_error_nll)
    }
}

/// Compares analytic gradients of both losses with central differences
/// (h = 1e-5) over every parameter of `n_cases` random configurations.
///
/// Relative error is `|a - fd| / max(|a|, |fd|, 1e-6 * max(1, |L|))`. The
/// floor tracks the loss value `L` because a central difference carries
/// round-off near `eps * |L| / h`, which swamps gradients much smaller
/// than the loss.
pub fn grad_check(dims: HeadDims, n_cases: usize, seed: u64, tol: f64) -> Result<GradCheckReport> {
    if n_cases == 0 {
        log::warn!("gradient check with zero cases passes vacuously");
    }
    let h = 1e-5;
    let mut worst = [0.0f64; 2];
    for case in 0..n_cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64));
        let w = HeadParams::init(rng.random(), dims);
        let f = FeatureVector((0..dims.input).map(|_| rng.random_range(-1.0..1.0)).collect());
        let target = loop {
            let v = [(); 3].map(|_| rng.random_range(-1.0..1.0));
            if let Ok(u) = UnitVec3::from_array(v) {
                break u;
            }
        };
        for (slot, loss) in [LossKind::WeightedNll, LossKind::MixtureNll].into_iter().enumerate() {
            let (l0, g) = backward(&f, &w, target, loss)?;
            let floor = 1e-6 * l0.get(loss).abs().max(1.0);
            let mut p = w.clone();
            for i in 0..dims.param_count() {
                let orig = p.values()[i];
                p.values_mut()[i] = orig + h;
                let lp = observation_loss(&f, &p, target, loss)?;
                p.values_mut()[i] = orig - h;
                let lm = observation_loss(&f, &p, target, loss)?;
                p.values_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = g.values()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
                worst[slot] = worst[slot].max(rel);
            }
        }
    }
    let max = worst[0].max(worst[1]);
    Ok(GradCheckReport {
        dims: dims.to_string(),
        cases: n_cases,
        tol,
        max_rel_error_weighted_nll: worst[0],
        max_rel_error_nll: worst[1],
        passed: max < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Scalar Adam written out independently of [`adam_step`].
    fn scalar_adam(theta0: [f64; 2], lr: f64, steps: usize) -> [f64; 2] {
        let mut out = theta0;
        for th in out.iter_mut() {
            let (mut m, mut v) = (0.0, 0.0);
            for t in 1..=steps {
                let g = 2.0 * *th;
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t as i32));
                let vh = v / (1.0 - 0.999f64.powi(t as i32));
                *th -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        out
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3);
        for _ in 0..10 {
            adam_step(&mut p, &[0.0; 3], &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[3.0, -0.5, 1e3], &mut s, &cfg).unwrap();
        for (x, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert_abs_diff_eq!(*x, sign * 0.01, epsilon = 1e-9);
        }
    }

    #[test]
    fn quadratic_converges_like_oracle() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut p = vec![1.0, 1.0];
        let mut s = AdamState::new(2);
        for _ in 0..200 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        }
        let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
        assert!(norm < 0.05, "{norm}");
        let oracle = scalar_adam([1.0, 1.0], 0.1, 200);
        assert_abs_diff_eq!(p[0], oracle[0], epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], oracle[1], epsilon = 1e-12);
    }

    #[test]
    fn non_finite_gradient_skipped() {
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2);
        let applied = adam_step(&mut p, &[f64::NAN, 1.0], &mut s, &AdamConfig::default()).unwrap();
        assert!(!applied);
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!((s.t, s.skipped), (0, 1));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.adam.beta2 = 1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    fn tiny_set(n: usize, dim: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let f = FeatureVector((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
                let p = GeoPoint::new(rng.random_range(-60.0..60.0), rng.random_range(-180.0..180.0)).unwrap();
                Example::new(f, p)
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic() {
        let dims = HeadDims::new(8, 6, 3).unwrap();
        let data = tiny_set(70, 8, 1);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        let (p1, h1) = train(&data, &data[..10], &cfg, dims).unwrap();
        let (p2, h2) = train(&data, &data[..10], &cfg, dims).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        assert_eq!(h1.epochs.len(), 2);
        assert!(h1.epochs.iter().all(|e| e.jensen_violations == 0 && e.skipped_steps == 0));
        let tsv = h1.to_tsv();
        assert_eq!(tsv.lines().count(), 3);
        assert_eq!(tsv.lines().nth(1).unwrap().split('\t').count(), 4);
    }

    #[test]
    fn weighted_nll_training_runs() {
        let dims = HeadDims::new(8, 6, 3).unwrap();
        let data = tiny_set(40, 8, 2);
        let cfg = TrainConfig {
            epochs: 1,
            loss: LossKind::WeightedNll,
            ..Default::default()
        };
        let (p, h) = train(&data, &data, &cfg, dims).unwrap();
        assert!(p.is_finite());
        assert!(h.epochs[0].mean_loss.is_finite());
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        let dims = HeadDims::new(8, 4, 2).unwrap();
        assert!(matches!(
            train(&[], &[], &TrainConfig::default(), dims),
            Err(Error::Empty(_))
        ));
        let bad = tiny_set(3, 7, 0);
        assert!(matches!(
            train(&bad, &[], &TrainConfig::default(), dims),
            Err(Error::DimensionMismatch { expected: 8, actual: 7 })
        ));
    }

    #[test]
    fn grad_check_default_dims_passes() {
        let r = grad_check(HeadDims::new(8, 4, 2).unwrap(), 25, 0, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn grad_check_tight_tolerance_fails() {
        let r = grad_check(HeadDims::new(8, 4, 2).unwrap(), 3, 0, 1e-12).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error() > 1e-12);
    }

    #[test]
    fn grad_check_zero_cases_vacuous() {
        let r = grad_check(HeadDims::new(8, 4, 2).unwrap(), 0, 0, 1e-4).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_rel_error(), 0.0);
    }
}
