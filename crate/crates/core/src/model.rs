//! Domain types for the regression mixture `y_i = x_iᵀβ_i + σ z_i` with
//! `β_i ~ G` and the likelihood computations shared by every estimator.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::kernels::KernelProfile;
use crate::quadrature::QuadratureGrid;

/// `ln(√(2π))`.
pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Normal density with standard deviation `sigma` evaluated at residual `r`.
pub fn gaussian_density(r: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return invalid(format!("sigma must be positive and finite, got {sigma}"));
    }
    if !r.is_finite() {
        return invalid(format!("residual must be finite, got {r}"));
    }
    let z = r / sigma;
    Ok((-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt()))
}

#[inline]
pub(crate) fn log_gaussian(r: f64, sigma: f64) -> f64 {
    let z = r / sigma;
    -0.5 * z * z - sigma.ln() - LN_SQRT_2PI
}

/// Numerically stable `ln Σ exp(a_k)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = values.into_iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot product of long vectors with independent partial sums, which lets the
/// compiler vectorize the reduction.
pub(crate) fn dot_long(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Observations `(x_i, y_i)` with an optional known noise scale.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Dataset {
    xs: Vec<f64>,
    ys: Vec<f64>,
    dim: usize,
    sigma: Option<f64>,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, ys: Vec<f64>, sigma: Option<f64>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return invalid("covariate rows have inconsistent dimensions");
        }
        Self::from_flat(rows.concat(), ys, dim, sigma)
    }

    /// Builds a dataset from a row-major `n × dim` covariate buffer.
    pub fn from_flat(xs: Vec<f64>, ys: Vec<f64>, dim: usize, sigma: Option<f64>) -> Result<Self> {
        if ys.is_empty() || dim == 0 {
            return invalid("dataset needs n >= 1 observations and d >= 1 covariates");
        }
        if xs.len() != ys.len() * dim {
            return invalid(format!("covariate buffer has {} entries, expected {} x {}", xs.len(), ys.len(), dim));
        }
        if let Some(i) = xs.iter().chain(&ys).position(|v| !v.is_finite()) {
            return invalid(format!("non-finite entry at flat position {i}"));
        }
        if let Some(s) = sigma {
            if !(s > 0.0 && s.is_finite()) {
                return invalid(format!("sigma must be positive, got {s}"));
            }
        }
        Ok(Self { xs, ys, dim, sigma })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.ys[i]
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn require_sigma(&self) -> Result<f64> {
        self.sigma.ok_or_else(|| Error::InvalidArgument("noise scale sigma is unknown".into()))
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::from_flat(self.xs.clone(), self.ys.clone(), self.dim, Some(sigma))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut xs = Vec::with_capacity(indices.len() * self.dim);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            xs.extend_from_slice(self.x(i));
            ys.push(self.ys[i]);
        }
        Self::from_flat(xs, ys, self.dim, self.sigma)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.xs.chunks_exact(self.dim).zip(self.ys.iter().copied())
    }
}

/// A finitely supported probability measure `Σ_j π_j δ_{β_j}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscreteMeasure {
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Weights must be positive and sum to one (within 1e-9; renormalized
    /// afterwards). Exactly repeated atoms are merged.
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return invalid("a discrete measure needs as many weights as atoms (at least one)");
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return invalid("atom weights must be positive");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("atom weights sum to {total}, not 1"));
        }
        Self::from_unnormalized(atoms, weights)
    }

    /// Normalizes nonnegative weights; zero-weight atoms are dropped.
    pub fn from_unnormalized(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.len() != weights.len() {
            return invalid("atom and weight counts differ");
        }
        let dim = atoms.first().map_or(0, Vec::len);
        if dim == 0 || atoms.iter().any(|a| a.len() != dim) {
            return invalid("atoms must share a positive dimension");
        }
        if atoms.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("atom coordinates must be finite");
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return invalid("weights must be nonnegative and finite");
        }
        let mut merged: Vec<(Vec<f64>, f64)> = Vec::with_capacity(atoms.len());
        for (a, w) in atoms.into_iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            match merged.iter_mut().find(|(b, _)| *b == a) {
                Some(entry) => entry.1 += w,
                None => merged.push((a, w)),
            }
        }
        let total: f64 = merged.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) {
            return invalid("total weight is zero");
        }
        let (atoms, weights) = merged.into_iter().map(|(a, w)| (a, w / total)).unzip();
        Ok(Self { atoms, weights })
    }

    pub fn dirac(beta: Vec<f64>) -> Result<Self> {
        Self::new(vec![beta], vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + Clone {
        self.atoms.iter().map(Vec::as_slice).zip(self.weights.iter().copied())
    }
}

/// A density on a tensor grid: `values[k]` is the density at node `k`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridDensity {
    grid: QuadratureGrid,
    values: Vec<f64>,
}

impl GridDensity {
    /// Values must be nonnegative and integrate to one within 1e-6.
    pub fn new(grid: QuadratureGrid, values: Vec<f64>) -> Result<Self> {
        let g = Self::checked(grid, values)?;
        let mass = g.mass();
        if (mass - 1.0).abs() > 1e-6 {
            return invalid(format!("grid density integrates to {mass}, not 1"));
        }
        Ok(g)
    }

    pub fn from_unnormalized(grid: QuadratureGrid, mut values: Vec<f64>) -> Result<Self> {
        let mass = Self::checked(grid.clone(), values.clone())?.mass();
        if !(mass > 0.0) || !mass.is_finite() {
            return invalid("grid density has no mass");
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Ok(Self { grid, values })
    }

    pub fn uniform(grid: QuadratureGrid) -> Self {
        let value = 1.0 / (grid.len() as f64 * grid.cell_volume());
        let values = vec![value; grid.len()];
        Self { grid, values }
    }

    fn checked(grid: QuadratureGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return invalid(format!("{} values for {} grid nodes", values.len(), grid.len()));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteNode { index });
        }
        if values.iter().any(|v| *v < 0.0) {
            return invalid("grid density values must be nonnegative");
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Probability assigned to the outermost layer of cells.
    pub fn boundary_mass(&self) -> f64 {
        let vol = self.grid.cell_volume();
        (0..self.grid.len()).filter(|&k| self.grid.is_boundary(k)).map(|k| self.values[k] * vol).sum()
    }

    /// Grid-L2 distance `sqrt(Σ (a − b)² · cell volume)`.
    pub fn l2_distance(&self, other: &Self) -> f64 {
        let ss: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum();
        (ss * self.grid.cell_volume()).sqrt()
    }

    /// The nodes carrying positive mass, as atoms.
    pub fn to_discrete(&self) -> Result<DiscreteMeasure> {
        let keep: Vec<usize> = (0..self.values.len()).filter(|&k| self.values[k] > 0.0).collect();
        let atoms = keep.iter().map(|&k| self.grid.node(k)).collect();
        let weights = keep.iter().map(|&k| self.values[k]).collect();
        DiscreteMeasure::from_unnormalized(atoms, weights)
    }
}

impl MarginalDensity for GridDensity {
    fn log_marginal(&self, x: &[f64], y: f64, sigma: f64) -> Result<f64> {
        let mut phi = vec![0.0; self.grid.len()];
        let peak = self.grid.fill_scaled_likelihood(x, y, sigma, &mut phi);
        let z = dot(&phi, &self.values) * self.grid.cell_volume();
        Ok(z.ln() + peak)
    }
}

/// Kernel density estimate `(1/(n_p h^d)) Σ_ℓ v(‖β − β_ℓ‖²/h²)` on particles.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParticleKde {
    points: Vec<Vec<f64>>,
    h: f64,
    profile: KernelProfile,
}

impl ParticleKde {
    pub fn new(points: Vec<Vec<f64>>, h: f64, profile: KernelProfile) -> Result<Self> {
        if points.is_empty() {
            return invalid("a particle estimate needs at least one particle");
        }
        if points.iter().any(|p| p.len() != profile.dim()) {
            return invalid("particle dimension differs from the kernel dimension");
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("particle coordinates must be finite");
        }
        if !(h > 0.0 && h.is_finite()) {
            return invalid(format!("bandwidth must be positive, got {h}"));
        }
        Ok(Self { points, h, profile })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn profile(&self) -> &KernelProfile {
        &self.profile
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn density(&self, beta: &[f64]) -> f64 {
        let h2 = self.h * self.h;
        let s: f64 = self.points.iter().map(|p| self.profile.v(sq_dist(beta, p) / h2)).sum();
        s / (self.points.len() as f64 * self.h.powi(self.profile.dim() as i32))
    }

    /// Density values at every node of `grid`.
    pub fn on_grid(&self, grid: &QuadratureGrid) -> Vec<f64> {
        (0..grid.len()).into_par_iter().map(|k| self.density(&grid.node(k))).collect()
    }

    /// Draws from the estimate: a uniformly chosen particle plus `h·N(0, I)`.
    pub fn sample(&self, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = crate::rng::seeded(seed);
        (0..m)
            .map(|_| {
                let p = &self.points[rng.random_range(0..self.points.len())];
                p.iter().map(|c| c + self.h * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect()
    }

    /// The particles as an equally weighted discrete measure.
    pub fn empirical(&self) -> Result<DiscreteMeasure> {
        let w = vec![1.0; self.points.len()];
        DiscreteMeasure::from_unnormalized(self.points.clone(), w)
    }
}

impl MarginalDensity for ParticleKde {
    /// Exact for the Gaussian profile: `y | x ~ (1/n_p) Σ_ℓ N(xᵀβ_ℓ, σ² + h²‖x‖²)`.
    fn log_marginal(&self, x: &[f64], y: f64, sigma: f64) -> Result<f64> {
        let scale = (sigma * sigma + self.h * self.h * dot(x, x)).sqrt();
        let ln_np = (self.points.len() as f64).ln();
        let terms = self.points.iter().map(|p| log_gaussian(y - dot(x, p), scale) - ln_np);
        Ok(log_sum_exp(terms))
    }
}

/// Anything that can integrate the regression likelihood against itself:
/// `ln ∫ φ_σ(y − xᵀβ) dG(β)`.
pub trait MarginalDensity {
    fn log_marginal(&self, x: &[f64], y: f64, sigma: f64) -> Result<f64>;
}

impl MarginalDensity for DiscreteMeasure {
    fn log_marginal(&self, x: &[f64], y: f64, sigma: f64) -> Result<f64> {
        let terms = self.iter().map(|(b, w)| w.ln() + log_gaussian(y - dot(x, b), sigma));
        Ok(log_sum_exp(terms))
    }
}

/// `L(G) = Σ_i ln ∫ φ_σ(y_i − x_iᵀβ) dG(β)`, evaluated in log space.
pub fn incomplete_loglik<G: MarginalDensity + Sync + ?Sized>(g: &G, data: &Dataset) -> Result<f64> {
    let sigma = data.require_sigma()?;
    if sigma < 1e-300 {
        return invalid("sigma too small");
    }
    let per_obs: Vec<f64> = (0..data.len()).into_par_iter().map(|i| g.log_marginal(data.x(i), data.y(i), sigma)).collect::<Result<_>>()?;
    if let Some(index) = per_obs.iter().position(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::DegenerateLikelihood { index });
    }
    Ok(per_obs.iter().sum())
}

/// Maximum a posteriori component for every observation; ties go to the
/// lowest atom index.
pub fn posterior_cluster_assign(g: &DiscreteMeasure, data: &Dataset) -> Result<Vec<usize>> {
    let sigma = data.require_sigma()?;
    if g.dim() != data.dim() {
        return invalid("measure and dataset dimensions differ");
    }
    let log_w: Vec<f64> = g.weights().iter().map(|w| w.ln()).collect();
    Ok(data
        .rows()
        .map(|(x, y)| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (j, b) in g.atoms().iter().enumerate() {
                let score = log_w[j] + log_gaussian(y - dot(x, b), sigma);
                if score > best_score {
                    best = j;
                    best_score = score;
                }
            }
            best
        })
        .collect())
}

/// Outcome of one estimation run.
#[derive(Clone, Debug, Serialize)]
pub struct FitReport<E> {
    pub estimator: E,
    /// Incomplete log-likelihood of every iterate, starting with the initialization.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_secs: f64,
}

impl<E> FitReport<E> {
    /// Largest decrease between consecutive log-likelihoods, measured relative
    /// to `1 + |L|`. Non-positive when the trace is monotone.
    pub fn worst_relative_decrease(&self) -> f64 {
        self.loglik_trace.windows(2).map(|w| (w[0] - w[1]) / (1.0 + w[0].abs())).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NAN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_obs(x: Vec<f64>, y: f64, sigma: f64) -> Dataset {
        Dataset::new(vec![x], vec![y], Some(sigma)).unwrap()
    }

    #[test]
    fn gaussian_density_reference_values() {
        assert_relative_eq!(gaussian_density(0.0, 1.0).unwrap(), 0.398_942_280_4, epsilon = 1e-10);
        assert_relative_eq!(gaussian_density(0.0, 0.5).unwrap(), 0.797_884_560_8, epsilon = 1e-10);
        assert!(gaussian_density(0.0, 0.0).is_err());
        assert!(gaussian_density(0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_density_matches_erf_difference_quotient() {
        // d/dr Φ(r/σ) = φ_σ(r); a symmetric difference of the erf-based CDF
        // is an independent route to the same number.
        let (r, s) = (1.3, 0.7);
        let cdf = |t: f64| 0.5 * (1.0 + statrs::function::erf::erf(t / (s * 2f64.sqrt())));
        let eps = 1e-5;
        let numeric = (cdf(r + eps) - cdf(r - eps)) / (2.0 * eps);
        assert_relative_eq!(gaussian_density(r, s).unwrap(), numeric, max_relative = 1e-8);
        assert_relative_eq!(gaussian_density(r, s).unwrap(), 0.101_595_769_327, max_relative = 1e-10);
    }

    #[test]
    fn loglik_single_and_two_atoms() {
        let data = one_obs(vec![1.0, 2.0], 0.7, 0.5);
        let b = vec![0.3, 0.1];
        let r = 0.7 - 0.5;
        let single = DiscreteMeasure::dirac(b.clone()).unwrap();
        assert_relative_eq!(incomplete_loglik(&single, &data).unwrap(), gaussian_density(r, 0.5).unwrap().ln(), epsilon = 1e-12);
        let b2 = vec![-1.0, 0.4];
        let r2 = 0.7 - (-1.0 + 0.8);
        let two = DiscreteMeasure::new(vec![b, b2], vec![0.5, 0.5]).unwrap();
        let expect = (0.5 * gaussian_density(r, 0.5).unwrap() + 0.5 * gaussian_density(r2, 0.5).unwrap()).ln();
        assert_relative_eq!(incomplete_loglik(&two, &data).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn loglik_survives_extreme_residuals() {
        let data = one_obs(vec![1.0], 1000.0, 1e-6);
        let g = DiscreteMeasure::dirac(vec![0.0]).unwrap();
        let l = incomplete_loglik(&g, &data).unwrap();
        assert!(l.is_finite() && l < -1e17);
    }

    #[test]
    fn loglik_permutation_invariant() {
        let data = Dataset::new(vec![vec![1.0, 0.5], vec![1.0, -2.0]], vec![0.2, 1.1], Some(0.3)).unwrap();
        let a = DiscreteMeasure::new(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, 2.0]], vec![0.2, 0.5, 0.3]).unwrap();
        let b = DiscreteMeasure::new(vec![vec![-1.0, 2.0], vec![0.0, 1.0], vec![1.0, 0.0]], vec![0.3, 0.2, 0.5]).unwrap();
        assert_relative_eq!(incomplete_loglik(&a, &data).unwrap(), incomplete_loglik(&b, &data).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn cluster_assignment_rules() {
        let data = Dataset::new(vec![vec![1.0], vec![1.0], vec![1.0]], vec![0.0, 5.0, -3.0], Some(1.0)).unwrap();
        let single = DiscreteMeasure::dirac(vec![2.0]).unwrap();
        assert_eq!(posterior_cluster_assign(&single, &data).unwrap(), vec![0, 0, 0]);
        // y = 0 is equidistant from atoms at -1 and 1 with equal weights.
        let tie = DiscreteMeasure::new(vec![vec![1.0], vec![-1.0]], vec![0.5, 0.5]).unwrap();
        assert_eq!(posterior_cluster_assign(&tie, &data).unwrap(), vec![0, 0, 1]);
    }

    #[test]
    fn discrete_measure_validation() {
        assert!(DiscreteMeasure::new(vec![vec![0.0]], vec![0.9]).is_err());
        assert!(DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![1.0, 0.0]).is_err());
        let merged = DiscreteMeasure::new(vec![vec![0.0], vec![0.0], vec![1.0]], vec![0.25, 0.25, 0.5]).unwrap();
        assert_eq!(merged.len(), 2);
        assert_relative_eq!(merged.weights()[0], 0.5);
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![], vec![], None).is_err());
        assert!(Dataset::new(vec![vec![1.0]], vec![f64::NAN], None).is_err());
        assert!(Dataset::new(vec![vec![1.0]], vec![1.0], Some(0.0)).is_err());
        assert!(Dataset::new(vec![vec![1.0], vec![1.0, 2.0]], vec![1.0, 2.0], None).is_err());
    }

    fn gaussian_on_grid(grid: &QuadratureGrid, mean: &[f64], sd: f64) -> GridDensity {
        let values =
            (0..grid.len()).map(|k| grid.node(k).iter().zip(mean).map(|(b, m)| gaussian_density(b - m, sd).unwrap()).product()).collect();
        GridDensity::from_unnormalized(grid.clone(), values).unwrap()
    }

    #[test]
    fn grid_marginal_matches_gaussian_prior_in_closed_form() {
        // β ~ N(m, s²I) gives y | x ~ N(xᵀm, σ² + s²‖x‖²).
        let (m, s, sigma) = ([0.4, -0.3], 0.6, 0.5);
        let grid = QuadratureGrid::cube(2, 4.0, 161).unwrap();
        let g = gaussian_on_grid(&grid, &m, s);
        for (x, y) in [([1.0, 0.5], 0.2), ([1.0, -1.5], 1.7), ([0.3, 2.0], -1.1)] {
            let exact = gaussian_density(y - dot(&x, &m), (sigma * sigma + s * s * dot(&x, &x)).sqrt()).unwrap();
            assert_relative_eq!(g.log_marginal(&x, y, sigma).unwrap(), exact.ln(), epsilon = 1e-8);
        }
        // A coarse grid drifts from the same oracle; a finer one closes the gap.
        let coarse = gaussian_on_grid(&QuadratureGrid::cube(2, 4.0, 9).unwrap(), &m, s);
        let fine = gaussian_on_grid(&QuadratureGrid::cube(2, 4.0, 41).unwrap(), &m, s);
        let (x, y) = ([1.0, 0.5], 0.2);
        let exact = gaussian_density(y - dot(&x, &m), (sigma * sigma + s * s * dot(&x, &x)).sqrt()).unwrap().ln();
        let err_coarse = (coarse.log_marginal(&x, y, sigma).unwrap() - exact).abs();
        let err_fine = (fine.log_marginal(&x, y, sigma).unwrap() - exact).abs();
        assert!(err_fine < err_coarse, "{err_fine} vs {err_coarse}");
    }

    #[test]
    fn particle_marginal_matches_quadrature_of_its_density() {
        let profile = KernelProfile::gaussian(2).unwrap();
        let kde = ParticleKde::new(vec![vec![1.0, 0.5], vec![-0.5, 0.2], vec![0.3, -1.0]], 0.4, profile).unwrap();
        let grid = QuadratureGrid::cube(2, 5.0, 201).unwrap();
        let on_grid = GridDensity::from_unnormalized(grid.clone(), kde.on_grid(&grid)).unwrap();
        for (x, y) in [([1.0, 0.7], 0.9), ([1.0, -2.0], -0.4), ([-0.5, 1.5], 0.0)] {
            assert_relative_eq!(kde.log_marginal(&x, y, 0.3).unwrap(), on_grid.log_marginal(&x, y, 0.3).unwrap(), epsilon = 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn assignment_invariant_under_weight_rescaling(
            scale in 0.01f64..100.0,
            ys in proptest::collection::vec(-5.0f64..5.0, 1..20),
            w in proptest::collection::vec(0.05f64..1.0, 3),
        ) {
            let rows = ys.iter().enumerate().map(|(i, _)| vec![1.0, (i as f64) * 0.3 - 2.0]).collect();
            let data = Dataset::new(rows, ys, Some(0.5)).unwrap();
            let atoms = vec![vec![3.0, -1.0], vec![1.0, 1.5], vec![-1.0, 0.5]];
            let a = DiscreteMeasure::from_unnormalized(atoms.clone(), w.clone()).unwrap();
            let b = DiscreteMeasure::from_unnormalized(atoms, w.iter().map(|v| v * scale).collect()).unwrap();
            proptest::prop_assert_eq!(
                posterior_cluster_assign(&a, &data).unwrap(),
                posterior_cluster_assign(&b, &data).unwrap()
            );
        }

        #[test]
        fn loglik_is_never_nan(
            y in -1e3f64..1e3,
            sigma in 1e-6f64..10.0,
            b in -1e3f64..1e3,
        ) {
            let data = Dataset::new(vec![vec![1.0]], vec![y], Some(sigma)).unwrap();
            let g = DiscreteMeasure::new(vec![vec![b], vec![-b]], vec![0.5, 0.5]).unwrap();
            proptest::prop_assert!(!incomplete_loglik(&g, &data).unwrap().is_nan());
        }
    }
}
