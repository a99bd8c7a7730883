//! The von Mises–Fisher distribution on S².
//!
//! With p = 3 the Bessel normalizer reduces to `C(κ) = κ / (4π sinh κ)`, so
//! everything here is closed-form. All densities are handled in the log
//! domain; `exp(κ μᵀx)` overflows long before `KAPPA_MAX`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sphere::{dot3, norm3, UnitVec3};

/// Upper bound on the concentration parameter.
pub const KAPPA_MAX: f64 = 1e4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LN_4PI: f64 = 2.531_024_246_969_290_8;
const NORM_SERIES_CUTOFF: f64 = 1e-4;
const RESULTANT_SERIES_CUTOFF: f64 = 1e-3;

/// One vMF component: mean direction and concentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmfComponent {
    pub mu: UnitVec3,
    pub kappa: f64,
}

impl VmfComponent {
    pub fn new(mu: UnitVec3, kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        if (mu.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "mean direction has norm {}",
                mu.norm()
            )));
        }
        Ok(VmfComponent { mu, kappa })
    }

    pub fn log_density(&self, x: UnitVec3) -> f64 {
        log_norm_const_unchecked(self.kappa) + self.kappa * self.mu.dot(&x)
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !kappa.is_finite() || !(0.0..=KAPPA_MAX).contains(&kappa) {
        return Err(Error::InvalidParameter(format!(
            "kappa {kappa} outside [0, {KAPPA_MAX}]"
        )));
    }
    Ok(())
}

/// `log C(κ)` with `C(κ) = κ / (4π sinh κ)`.
pub fn log_norm_const(kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    Ok(log_norm_const_unchecked(kappa))
}

pub(crate) fn log_norm_const_unchecked(kappa: f64) -> f64 {
    if kappa < NORM_SERIES_CUTOFF {
        // log(sinh κ / κ) = κ²/6 - κ⁴/180 + ...
        -LN_4PI - kappa * kappa / 6.0
    } else {
        // 2 sinh κ = e^κ (1 - e^{-2κ})
        kappa.ln() - LN_2PI - kappa - (-(-2.0 * kappa).exp_m1()).ln()
    }
}

/// `log f(x; μ, κ)`.
pub fn log_density(x: UnitVec3, c: &VmfComponent) -> f64 {
    c.log_density(x)
}

/// Mean resultant length `A(κ) = coth κ - 1/κ`, i.e. `E[μᵀx]`.
///
/// Also equals `-d log C / dκ`.
pub fn mean_resultant_length(kappa: f64) -> f64 {
    if kappa < RESULTANT_SERIES_CUTOFF {
        kappa / 3.0 - kappa.powi(3) / 45.0
    } else {
        1.0 / kappa.tanh() - 1.0 / kappa
    }
}

/// Gradient of `log f(x; μ, κ)` where `μ = mu_raw / ‖mu_raw‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmfGrad {
    pub mu_raw: [f64; 3],
    pub kappa: f64,
}

/// Gradient of the log-density with respect to the unnormalized mean
/// direction and the concentration.
///
/// The mean-direction part is the tangential projection of `κx`, scaled by
/// `1/‖mu_raw‖`; the radial component is zero because normalization discards it.
pub fn grad_log_density(x: UnitVec3, mu_raw: [f64; 3], kappa: f64) -> VmfGrad {
    let r = norm3(mu_raw);
    let mu = [mu_raw[0] / r, mu_raw[1] / r, mu_raw[2] / r];
    let xa = x.to_array();
    let cos = dot3(mu, xa);
    let scale = kappa / r;
    VmfGrad {
        mu_raw: [
            scale * (xa[0] - cos * mu[0]),
            scale * (xa[1] - cos * mu[1]),
            scale * (xa[2] - cos * mu[2]),
        ],
        kappa: cos - mean_resultant_length(kappa),
    }
}

/// Draws one sample using the exact p = 3 inverse CDF of `w = μᵀx`.
pub fn draw<R: Rng + ?Sized>(c: &VmfComponent, rng: &mut R) -> UnitVec3 {
    let u: f64 = rng.random();
    let w = if c.kappa == 0.0 {
        2.0 * u - 1.0
    } else {
        // 1 + log(u + (1 - u) e^{-2κ}) / κ
        1.0 + ((1.0 - u) * (-2.0 * c.kappa).exp_m1()).ln_1p() / c.kappa
    }
    .clamp(-1.0, 1.0);
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let radial = (1.0 - w * w).max(0.0).sqrt();
    let (s, co) = phi.sin_cos();
    let (e1, e2) = c.mu.tangent_frame();
    let mu = c.mu.to_array();
    let v = [
        w * mu[0] + radial * (co * e1[0] + s * e2[0]),
        w * mu[1] + radial * (co * e1[1] + s * e2[1]),
        w * mu[2] + radial * (co * e1[2] + s * e2[2]),
    ];
    // renormalize away rounding drift
    UnitVec3::from_array(v).unwrap_or(c.mu)
}

/// `n` i.i.d. draws, reproducible for a given seed.
pub fn sample(c: &VmfComponent, n: usize, seed: u64) -> Vec<UnitVec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| draw(c, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{geo_to_cart, GeoPoint};
    use approx::assert_abs_diff_eq;

    fn comp(lat: f64, lon: f64, kappa: f64) -> VmfComponent {
        VmfComponent::new(geo_to_cart(GeoPoint::new(lat, lon).unwrap()), kappa).unwrap()
    }

    /// ∫ exp(log f) over a 1° lat/lon midpoint grid with cos(lat) weights.
    fn grid_integral(f: impl Fn(UnitVec3) -> f64) -> f64 {
        let step = 1.0f64;
        let cell = step.to_radians().powi(2);
        let mut total = 0.0;
        for i in 0..180 {
            let lat = -90.0 + (i as f64 + 0.5) * step;
            for j in 0..360 {
                let lon = -180.0 + (j as f64 + 0.5) * step;
                let x = geo_to_cart(GeoPoint::new(lat, lon).unwrap());
                total += f(x).exp() * cell * lat.to_radians().cos();
            }
        }
        total
    }

    #[test]
    fn uniform_limit() {
        assert_abs_diff_eq!(log_norm_const(0.0).unwrap(), -2.531_024_246_969_290_7, epsilon = 1e-15);
        let c = comp(10.0, 10.0, 0.0);
        let x = geo_to_cart(GeoPoint::new(-40.0, 100.0).unwrap());
        assert_abs_diff_eq!(c.log_density(x).exp(), 0.079_577_471_545_947_67, epsilon = 1e-15);
    }

    #[test]
    fn kappa_one_closed_form() {
        // oracle values from a 50-digit evaluation of log(κ / (4π sinh κ))
        assert_abs_diff_eq!(log_norm_const(1.0).unwrap(), -2.692_463_608_540_486_5, epsilon = 1e-13);
        let c = comp(0.0, 0.0, 1.0);
        assert_abs_diff_eq!(c.log_density(c.mu).exp(), 0.184_065_499_616_596, epsilon = 1e-13);
    }

    #[test]
    fn large_kappa_stays_finite() {
        let v = log_norm_const(500.0).unwrap();
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, 500f64.ln() - LN_2PI - 500.0, epsilon = 1e-12);
        assert!(log_norm_const(KAPPA_MAX).unwrap().is_finite());
    }

    #[test]
    fn rejects_bad_kappa() {
        assert!(log_norm_const(-1.0).is_err());
        assert!(log_norm_const(f64::NAN).is_err());
        assert!(log_norm_const(KAPPA_MAX * 2.0).is_err());
    }

    #[test]
    fn continuous_across_series_cutoff() {
        let below = log_norm_const(NORM_SERIES_CUTOFF * (1.0 - 1e-12)).unwrap();
        let above = log_norm_const(NORM_SERIES_CUTOFF).unwrap();
        assert_abs_diff_eq!(below, above, epsilon = 1e-10);
        let below = mean_resultant_length(RESULTANT_SERIES_CUTOFF * (1.0 - 1e-12));
        let above = mean_resultant_length(RESULTANT_SERIES_CUTOFF);
        assert_abs_diff_eq!(below, above, epsilon = 1e-10);
    }

    #[test]
    fn density_normalizes() {
        for &kappa in &[0.1, 1.0, 10.0, 100.0] {
            let c = comp(37.0, -120.0, kappa);
            let total = grid_integral(|x| c.log_density(x));
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn density_peaks_at_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = comp(-12.0, 77.0, 3.5);
        let peak = c.log_density(c.mu);
        for _ in 0..1000 {
            let x = draw(&comp(0.0, 0.0, 0.0), &mut rng);
            assert!(c.log_density(x) <= peak);
        }
    }

    #[test]
    fn resultant_length_values() {
        assert_eq!(mean_resultant_length(0.0), 0.0);
        assert_abs_diff_eq!(mean_resultant_length(10.0), 0.900_000_004_122_307_3, epsilon = 1e-14);
        let ks = [0.01, 0.1, 1.0, 10.0, 100.0];
        for w in ks.windows(2) {
            assert!(mean_resultant_length(w[0]) < mean_resultant_length(w[1]));
        }
        assert!(mean_resultant_length(1e4) < 1.0);
    }

    #[test]
    fn kappa_gradient_matches_finite_difference() {
        let c = comp(5.0, 5.0, 1.0);
        let g = grad_log_density(c.mu, c.mu.to_array(), 1.0);
        let h = 1e-5;
        let fd = (comp(5.0, 5.0, 1.0 + h).log_density(c.mu) - comp(5.0, 5.0, 1.0 - h).log_density(c.mu))
            / (2.0 * h);
        assert!(((g.kappa - fd) / fd).abs() < 1e-6, "{} vs {}", g.kappa, fd);
    }

    #[test]
    fn mu_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let mu_raw: [f64; 3] = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            let kappa = rng.random_range(0.1..50.0);
            let x = draw(&comp(0.0, 0.0, 0.0), &mut rng);
            let f = |m: [f64; 3]| {
                VmfComponent::new(UnitVec3::from_array(m).unwrap(), kappa)
                    .unwrap()
                    .log_density(x)
            };
            let g = grad_log_density(x, mu_raw, kappa);
            let scale = g.mu_raw.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-3);
            for i in 0..3 {
                let (mut p, mut m) = (mu_raw, mu_raw);
                p[i] += h;
                m[i] -= h;
                let fd = (f(p) - f(m)) / (2.0 * h);
                worst = worst.max((g.mu_raw[i] - fd).abs() / scale);
            }
        }
        assert!(worst < 1e-4, "max rel error {worst}");
    }

    #[test]
    fn kappa_gradient_vanishes_at_uniform_limit_orthogonal() {
        let mu = geo_to_cart(GeoPoint::new(0.0, 0.0).unwrap());
        let x = geo_to_cart(GeoPoint::new(0.0, 90.0).unwrap());
        let g = grad_log_density(x, mu.to_array(), 1e-9);
        assert_abs_diff_eq!(g.kappa, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn mu_gradient_is_tangent() {
        let c = comp(20.0, 30.0, 4.0);
        let x = geo_to_cart(GeoPoint::new(25.0, 10.0).unwrap());
        let g = grad_log_density(x, [2.0 * c.mu.x(), 2.0 * c.mu.y(), 2.0 * c.mu.z()], 4.0);
        assert_abs_diff_eq!(dot3(g.mu_raw, c.mu.to_array()), 0.0, epsilon = 1e-12);
    }

    fn resultant(xs: &[UnitVec3]) -> [f64; 3] {
        let n = xs.len() as f64;
        let mut s = [0.0; 3];
        for x in xs {
            s[0] += x.x();
            s[1] += x.y();
            s[2] += x.z();
        }
        [s[0] / n, s[1] / n, s[2] / n]
    }

    #[test]
    fn uniform_sampler_has_zero_mean() {
        let xs = sample(&comp(0.0, 0.0, 0.0), 100_000, 5);
        assert!(norm3(resultant(&xs)) < 0.02);
    }

    #[test]
    fn sampler_resultant_length_matches_moment() {
        let c = comp(45.0, 45.0, 10.0);
        let xs = sample(&c, 100_000, 6);
        let r = norm3(resultant(&xs));
        assert_abs_diff_eq!(r, mean_resultant_length(10.0), epsilon = 0.01);
    }

    #[test]
    fn sampler_mean_direction() {
        let c = comp(-30.0, 150.0, 50.0);
        let xs = sample(&c, 100_000, 7);
        let m = UnitVec3::from_array(resultant(&xs)).unwrap();
        let angle = crate::sphere::angular_distance(m, c.mu).to_degrees();
        assert!(angle < 0.5, "mean direction off by {angle}°");
    }

    #[test]
    fn sampler_is_seeded() {
        let c = comp(1.0, 2.0, 3.0);
        assert_eq!(sample(&c, 10, 99), sample(&c, 10, 99));
        assert_ne!(sample(&c, 10, 99), sample(&c, 10, 100));
    }

    #[test]
    fn extreme_kappa_samples_are_unit() {
        for &kappa in &[1e-12, 1e-6, KAPPA_MAX] {
            for x in sample(&comp(60.0, -10.0, kappa), 1000, 1) {
                assert_abs_diff_eq!(x.norm(), 1.0, epsilon = 1e-12);
            }
        }
    }
}
