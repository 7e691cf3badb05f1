//! Quadrature rules for the β-integrals: midpoint tensor grids and scattered
//! (Monte Carlo) node sets, plus sampling from gridded densities.

use rand::Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::{log_gaussian, GridDensity};
use crate::rng;

/// Midpoint tensor grid over a box; node coordinates are cell centers and the
/// flattened node index runs fastest along the last axis.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuadratureGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    nodes: Vec<usize>,
}

impl QuadratureGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, nodes: Vec<usize>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() || lower.len() != nodes.len() {
            return invalid("grid bounds and node counts must have the same positive length");
        }
        if nodes.iter().any(|&k| k < 8) {
            return invalid("a grid needs at least 8 nodes per dimension");
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(u > l) || !l.is_finite() || !u.is_finite()) {
            return invalid("grid box must have positive, finite extent in every dimension");
        }
        Ok(Self { lower, upper, nodes })
    }

    /// `[-half_width, half_width]^dim` with `per_dim` nodes along each axis.
    pub fn cube(dim: usize, half_width: f64, per_dim: usize) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim], vec![per_dim; dim])
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn nodes_per_dim(&self) -> &[usize] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.nodes[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn coord(&self, axis: usize, j: usize) -> f64 {
        self.lower[axis] + (j as f64 + 0.5) * self.spacing(axis)
    }

    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        (0..self.nodes[axis]).map(|j| self.coord(axis, j)).collect()
    }

    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for a in (0..self.dim()).rev() {
            out[a] = flat % self.nodes[a];
            flat /= self.nodes[a];
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.dim()];
        self.multi_index(flat, &mut idx);
        idx.iter().enumerate().map(|(a, &j)| self.coord(a, j)).collect()
    }

    /// Flattened index of the cell containing `point`, if inside the box.
    pub fn cell_of(&self, point: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for a in 0..self.dim() {
            let t = (point[a] - self.lower[a]) / self.spacing(a);
            if !(t >= 0.0) || t >= self.nodes[a] as f64 {
                return None;
            }
            flat = flat * self.nodes[a] + t as usize;
        }
        Some(flat)
    }

    /// Whether the node lies in the outermost layer of cells.
    pub fn is_boundary(&self, flat: usize) -> bool {
        let mut idx = vec![0; self.dim()];
        self.multi_index(flat, &mut idx);
        idx.iter().zip(&self.nodes).any(|(&j, &k)| j == 0 || j + 1 == k)
    }

    /// Writes `φ_σ(y − xᵀβ) / e^{M}` at every node and returns `M`, the log of
    /// the largest node value. Each line along the last axis is filled from its
    /// peak outward with a two-multiplication recurrence instead of one `exp`
    /// per node.
    pub(crate) fn fill_scaled_likelihood(&self, x: &[f64], y: f64, sigma: f64, out: &mut [f64]) -> f64 {
        let d = self.dim();
        let last = d - 1;
        let len_last = self.nodes[last];
        let rows = self.len() / len_last;
        let delta = self.spacing(last);
        let s = x[last] * delta;
        let inv_var = 1.0 / (sigma * sigma);
        let first_last = self.coord(last, 0);

        let mut idx = vec![0usize; d];
        let mut starts = Vec::with_capacity(rows);
        let mut peak = f64::NEG_INFINITY;
        for row in 0..rows {
            self.multi_index(row * len_last, &mut idx);
            let mut base = y - x[last] * first_last;
            for a in 0..last {
                base -= x[a] * self.coord(a, idx[a]);
            }
            // residual at last-axis index k is base - k·s
            let k_star = if s == 0.0 { 0 } else { (base / s).round().clamp(0.0, (len_last - 1) as f64) as usize };
            let r = base - k_star as f64 * s;
            let lp = -0.5 * r * r * inv_var;
            peak = peak.max(lp);
            starts.push((base, k_star, lp));
        }

        let shrink = (-s * s * inv_var).exp();
        for (row, &(base, k_star, lp)) in starts.iter().enumerate() {
            let line = &mut out[row * len_last..(row + 1) * len_last];
            let f0 = (lp - peak).exp();
            line[k_star] = f0;
            let r0 = base - k_star as f64 * s;
            let mut f = f0;
            let mut q = ((r0 * s - 0.5 * s * s) * inv_var).exp();
            for v in line.iter_mut().skip(k_star + 1) {
                f *= q;
                q *= shrink;
                *v = f;
            }
            let mut f = f0;
            let mut q = ((-r0 * s - 0.5 * s * s) * inv_var).exp();
            for v in line[..k_star].iter_mut().rev() {
                f *= q;
                q *= shrink;
                *v = f;
            }
        }
        peak + log_gaussian(0.0, sigma)
    }
}

/// Node set with base weights: `∫ f ≈ Σ_p base_p f(p)`.
#[derive(Clone, Debug)]
pub enum QuadratureRule {
    Grid(QuadratureGrid),
    /// Arbitrary nodes stored row-major, with one base weight per node.
    Scattered {
        dim: usize,
        coords: Vec<f64>,
        base: Vec<f64>,
    },
}

impl QuadratureRule {
    pub fn dim(&self) -> usize {
        match self {
            Self::Grid(g) => g.dim(),
            Self::Scattered { dim, .. } => *dim,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Grid(g) => g.len(),
            Self::Scattered { base, .. } => base.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn base_weight(&self, k: usize) -> f64 {
        match self {
            Self::Grid(g) => g.cell_volume(),
            Self::Scattered { base, .. } => base[k],
        }
    }

    /// All node coordinates, row-major.
    pub fn coords(&self) -> Vec<f64> {
        match self {
            Self::Grid(g) => (0..g.len()).flat_map(|k| g.node(k)).collect(),
            Self::Scattered { coords, .. } => coords.clone(),
        }
    }

    pub(crate) fn fill_scaled_likelihood(&self, x: &[f64], y: f64, sigma: f64, out: &mut [f64]) -> f64 {
        match self {
            Self::Grid(g) => g.fill_scaled_likelihood(x, y, sigma, out),
            Self::Scattered { dim, coords, .. } => {
                let mut peak = f64::NEG_INFINITY;
                for (o, p) in out.iter_mut().zip(coords.chunks_exact(*dim)) {
                    let r = y - crate::model::dot(x, p);
                    *o = log_gaussian(r, sigma);
                    peak = peak.max(*o);
                }
                for o in out.iter_mut() {
                    *o = (*o - peak).exp();
                }
                peak
            }
        }
    }
}

/// How β-integrals are evaluated.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum IntegrationPolicy {
    Grid(QuadratureGrid),
    /// Self-normalized importance sampling with draws from the current estimate.
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
}

impl IntegrationPolicy {
    pub fn monte_carlo(samples: usize, seed: u64) -> Result<Self> {
        if samples < 100 {
            return invalid("Monte Carlo integration needs at least 100 samples");
        }
        Ok(Self::MonteCarlo { samples, seed })
    }

    /// Grid over `[-4, 4]^d` with 161 nodes per axis for `d <= 2`, Monte Carlo
    /// with 4000 draws otherwise.
    pub fn default_for(dim: usize, seed: u64) -> Result<Self> {
        if dim <= 2 {
            Ok(Self::Grid(QuadratureGrid::cube(dim, 4.0, 161)?))
        } else {
            Self::monte_carlo(4000, seed)
        }
    }
}

/// Midpoint rule `Σ f(node) · cell volume`.
pub fn integrate_on_grid(values: &[f64], grid: &QuadratureGrid) -> Result<f64> {
    if values.len() != grid.len() {
        return invalid(format!("{} values for a grid of {} nodes", values.len(), grid.len()));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteNode { index });
    }
    Ok(values.iter().sum::<f64>() * grid.cell_volume())
}

/// Draws `m` points: a cell by inverse CDF over the cell masses, then a
/// uniform point inside it.
pub fn sample_from_grid_density(g: &GridDensity, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let grid = g.grid();
    let mut cdf = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    for v in g.values() {
        acc += v;
        cdf.push(acc);
    }
    let mut rng = rng::seeded(seed);
    let mut idx = vec![0usize; grid.dim()];
    (0..m)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let cell = cdf.partition_point(|&c| c <= u).min(grid.len() - 1);
            grid.multi_index(cell, &mut idx);
            idx.iter()
                .enumerate()
                .map(|(a, &j)| {
                    let lo = grid.lower()[a] + j as f64 * grid.spacing(a);
                    lo + rng.random::<f64>() * grid.spacing(a)
                })
                .collect()
        })
        .collect()
}
