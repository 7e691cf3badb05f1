//! Spherically symmetric kernel profiles and the maximal-smoothing bandwidth.

use std::f64::consts::PI;

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};

/// Gaussian profile `v(t) = (2π)^{-d/2} e^{-t/2}`, so that `V(x) = v(‖x‖²)` is
/// the standard normal density on `R^d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KernelProfile {
    dim: usize,
    norm: f64,
}

impl KernelProfile {
    pub fn gaussian(dim: usize) -> Result<Self> {
        if dim == 0 {
            return invalid("kernel dimension must be at least 1");
        }
        let profile = Self { dim, norm: (2.0 * PI).powf(-(dim as f64) / 2.0) };
        if dim <= 3 {
            let mass = profile.radial_mass();
            if (mass - 1.0).abs() > 1e-6 {
                return invalid(format!("profile integrates to {mass}, not 1"));
            }
        }
        Ok(profile)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Normalizing constant `v(0)`.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn v(&self, t: f64) -> f64 {
        self.norm * (-0.5 * t).exp()
    }

    /// `ln v(t)`.
    pub fn ln_v(&self, t: f64) -> f64 {
        self.norm.ln() - 0.5 * t
    }

    /// `w(t) = -v'(t)`.
    pub fn w(&self, t: f64) -> f64 {
        0.5 * self.v(t)
    }

    /// `v''(t)`.
    pub fn v2(&self, t: f64) -> f64 {
        0.25 * self.v(t)
    }

    /// `R(V) = ∫ V²`.
    pub fn roughness(&self) -> f64 {
        (4.0 * PI).powf(-(self.dim as f64) / 2.0)
    }

    /// `sup_t v(t)`.
    pub fn sup(&self) -> f64 {
        self.norm
    }

    /// `∫_{R^d} v(‖x‖²) dx` as a one-dimensional radial integral.
    fn radial_mass(&self) -> f64 {
        let d = self.dim as f64;
        let sphere = 2.0 * PI.powf(d / 2.0) / ln_gamma(d / 2.0).exp();
        let (upper, steps) = (40.0, 40_000);
        let dr = upper / steps as f64;
        let sum: f64 = (0..steps)
            .map(|k| {
                let r = (k as f64 + 0.5) * dr;
                r.powf(d - 1.0) * self.v(r * r)
            })
            .sum();
        sphere * sum * dr
    }
}

/// Maximal-smoothing bandwidth
/// `h = U [(d+8)^{(d+6)/2} π^{d/2} R(V) / (16 n Γ((d+8)/2) d (d+2))]^{1/(d+4)}`.
pub fn oversmooth_bandwidth(n: usize, u: f64, profile: &KernelProfile) -> Result<f64> {
    if n < 2 {
        return invalid("oversmoothing bandwidth needs n >= 2");
    }
    if !(u > 0.0 && u.is_finite()) {
        return invalid(format!("scale U must be positive, got {u}"));
    }
    let d = profile.dim() as f64;
    let ln_bracket = (d + 6.0) / 2.0 * (d + 8.0).ln() + d / 2.0 * PI.ln() + profile.roughness().ln()
        - (16.0 * n as f64).ln()
        - ln_gamma((d + 8.0) / 2.0)
        - (d * (d + 2.0)).ln();
    Ok(u * (ln_bracket / (d + 4.0)).exp())
}

/// Quantile with linear interpolation between order statistics of a sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean over dimensions of the Gaussian-scaled interquartile range `IQR/1.34`.
pub fn scale_estimate_u(sample: &[Vec<f64>]) -> Result<f64> {
    if sample.len() < 4 {
        return invalid("scale estimate needs at least 4 points");
    }
    let dim = sample[0].len();
    if dim == 0 || sample.iter().any(|p| p.len() != dim) {
        return invalid("sample points must share a positive dimension");
    }
    let mut total = 0.0;
    let mut column = vec![0.0; sample.len()];
    for a in 0..dim {
        for (c, p) in column.iter_mut().zip(sample) {
            *c = p[a];
        }
        if column.iter().any(|v| !v.is_finite()) {
            return invalid("sample contains non-finite coordinates");
        }
        column.sort_by(f64::total_cmp);
        total += (quantile_sorted(&column, 0.75) - quantile_sorted(&column, 0.25)) / 1.34;
    }
    if total <= 0.0 {
        return Err(Error::DegenerateScale);
    }
    Ok(total / dim as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn gaussian_profile_constants() {
        let p = KernelProfile::gaussian(2).unwrap();
        assert_relative_eq!(p.v(0.0), 0.159_154_943_1, epsilon = 1e-10);
        assert_relative_eq!(p.roughness(), 1.0 / (4.0 * PI), epsilon = 1e-15);
        assert!(KernelProfile::gaussian(0).is_err());
    }

    #[test]
    fn one_dimensional_profile_integrates_to_one() {
        let p = KernelProfile::gaussian(1).unwrap();
        let dx = 1e-3;
        let mass: f64 = (-20_000..20_000).map(|k| p.v(((k as f64 + 0.5) * dx).powi(2)) * dx).sum();
        assert_relative_eq!(mass, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn w_is_negative_derivative() {
        let p = KernelProfile::gaussian(2).unwrap();
        let mut rng = crate::rng::seeded(3);
        for _ in 0..20 {
            let t: f64 = rng.random_range(1e-3..50.0);
            let eps = 1e-5 * t.max(1.0);
            let fd = -(p.v(t + eps) - p.v(t - eps)) / (2.0 * eps);
            assert_relative_eq!(p.w(t), fd, max_relative = 1e-6);
            let fd2 = (p.v(t + eps) - 2.0 * p.v(t) + p.v(t - eps)) / (eps * eps);
            assert_relative_eq!(p.v2(t), fd2, max_relative = 1e-3, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_sum_of_profile_is_midpoint_convex() {
        let p = KernelProfile::gaussian(2).unwrap();
        let mut rng = crate::rng::seeded(11);
        let f = |t: &[f64]| t.iter().map(|&s| p.v(s)).sum::<f64>().ln();
        for _ in 0..200 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..30.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..30.0)).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            assert!(f(&mid) <= 0.5 * (f(&a) + f(&b)) + 1e-12);
        }
    }

    #[test]
    fn bandwidth_matches_direct_formula() {
        // d = 2: (10^4 · π · (1/4π)) / (16 n · 24 · 8), raised to 1/6.
        let p = KernelProfile::gaussian(2).unwrap();
        let n = 1000usize;
        let direct = (1.0e4 * 0.25 / (16.0 * n as f64 * 24.0 * 8.0)).powf(1.0 / 6.0);
        assert_relative_eq!(oversmooth_bandwidth(n, 1.0, &p).unwrap(), direct, max_relative = 1e-13);
        // d = 1: Γ(4.5) = 105√π/16 exactly.
        let p1 = KernelProfile::gaussian(1).unwrap();
        let gamma = 105.0 * PI.sqrt() / 16.0;
        let direct1 = (9f64.powf(3.5) * PI.sqrt() * (4.0 * PI).powf(-0.5) / (16.0 * 50.0 * gamma * 3.0)).powf(0.2);
        assert_relative_eq!(oversmooth_bandwidth(50, 1.0, &p1).unwrap(), direct1, max_relative = 1e-12);
    }

    #[test]
    fn bandwidth_scaling_laws() {
        let p = KernelProfile::gaussian(2).unwrap();
        let h = oversmooth_bandwidth(500, 1.3, &p).unwrap();
        assert_relative_eq!(oversmooth_bandwidth(1000, 1.3, &p).unwrap(), h * 2f64.powf(-1.0 / 6.0), max_relative = 1e-13);
        assert_relative_eq!(oversmooth_bandwidth(500, 2.6, &p).unwrap(), 2.0 * h, max_relative = 1e-13);
        assert!(oversmooth_bandwidth(500, 0.0, &p).is_err());
        assert!(oversmooth_bandwidth(1, 1.0, &p).is_err());
    }

    #[test]
    fn u_of_standard_normal_is_near_one() {
        let mut rng = crate::rng::seeded(5);
        let sample: Vec<Vec<f64>> = (0..100_000).map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        let u = scale_estimate_u(&sample).unwrap();
        assert!((u - 1.0).abs() < 0.05, "U = {u}");
    }

    #[test]
    fn u_zero_dimension_and_equivariance() {
        let sample: Vec<Vec<f64>> = (0..9).map(|k| vec![2.0, k as f64]).collect();
        // Second coordinate 0..8: quartiles 2 and 6.
        assert_relative_eq!(scale_estimate_u(&sample).unwrap(), (4.0 / 1.34) / 2.0, epsilon = 1e-12);
        let scaled: Vec<Vec<f64>> = sample.iter().map(|p| vec![3.0 * p[0], 3.0 * p[1]]).collect();
        assert_relative_eq!(scale_estimate_u(&scaled).unwrap(), 3.0 * scale_estimate_u(&sample).unwrap(), epsilon = 1e-12);
        let flat: Vec<Vec<f64>> = (0..9).map(|_| vec![1.0, 1.0]).collect();
        assert!(matches!(scale_estimate_u(&flat), Err(Error::DegenerateScale)));
    }
}
