//! Mode and ridge seeking on a Gaussian kernel density estimate of a sample:
//! mean shift and subspace-constrained mean shift (SCMS).

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::kernels::KernelProfile;
use crate::model::{sq_dist, DiscreteMeasure};
use crate::npkmle::single_linkage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShiftConfig {
    /// Mean shift stops when a step is shorter than this.
    pub tol: f64,
    pub max_iter: usize,
    /// Limit points closer than `merge_factor · h` are one mode.
    pub merge_factor: f64,
    /// Ignore sample points farther than `cutoff · h` from the query.
    /// `None` evaluates the full sum.
    pub cutoff: Option<f64>,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 10_000, merge_factor: 0.1, cutoff: None }
    }
}

/// Sample points bucketed into cubes of side `cutoff · h`.
struct CellIndex {
    side: f64,
    cells: HashMap<Vec<i64>, Vec<usize>>,
}

impl CellIndex {
    fn new(points: &[Vec<f64>], side: f64) -> Self {
        let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, side)).or_default().push(i);
        }
        Self { side, cells }
    }

    fn key(p: &[f64], side: f64) -> Vec<i64> {
        p.iter().map(|v| (v / side).floor() as i64).collect()
    }

    /// Indices in the 3^d cells around `x`, in increasing order.
    fn near(&self, x: &[f64], out: &mut Vec<usize>) {
        out.clear();
        let base = Self::key(x, self.side);
        let d = base.len();
        let mut offset = vec![-1i64; d];
        loop {
            let key: Vec<i64> = base.iter().zip(&offset).map(|(b, o)| b + o).collect();
            if let Some(v) = self.cells.get(&key) {
                out.extend_from_slice(v);
            }
            let mut a = 0;
            while a < d && offset[a] == 1 {
                offset[a] = -1;
                a += 1;
            }
            if a == d {
                break;
            }
            offset[a] += 1;
        }
        out.sort_unstable();
    }
}

/// A sample with its kernel and bandwidth.
pub struct KdeSample<'a> {
    points: &'a [Vec<f64>],
    h: f64,
    profile: KernelProfile,
    index: Option<CellIndex>,
}

impl<'a> KdeSample<'a> {
    pub fn new(points: &'a [Vec<f64>], h: f64, profile: KernelProfile, cutoff: Option<f64>) -> Result<Self> {
        if points.is_empty() {
            return invalid("kernel density needs a nonempty sample");
        }
        if points.iter().any(|p| p.len() != profile.dim()) {
            return invalid("sample and kernel dimensions differ");
        }
        if !(h > 0.0) {
            return invalid("bandwidth must be positive");
        }
        let index = match cutoff {
            Some(c) if c > 0.0 => Some(CellIndex::new(points, c * h)),
            Some(_) => return invalid("cutoff must be positive"),
            None => None,
        };
        Ok(Self { points, h, profile, index })
    }

    fn for_each_near(&self, x: &[f64], buf: &mut Vec<usize>, mut f: impl FnMut(&[f64])) {
        match &self.index {
            Some(idx) => {
                idx.near(x, buf);
                if buf.is_empty() {
                    self.points.iter().for_each(|p| f(p));
                } else {
                    buf.iter().for_each(|&i| f(&self.points[i]));
                }
            }
            None => self.points.iter().for_each(|p| f(p)),
        }
    }

    /// Density, gradient and Hessian at `x`.
    pub fn eval(&self, x: &[f64]) -> KdeDerivatives {
        let d = x.len();
        let h2 = self.h * self.h;
        let scale = 1.0 / (self.points.len() as f64 * self.h.powi(d as i32));
        let mut density = 0.0;
        let mut gradient = DVector::zeros(d);
        let mut hessian = DMatrix::zeros(d, d);
        let mut buf = Vec::new();
        self.for_each_near(x, &mut buf, |p| {
            let t = sq_dist(x, p) / h2;
            let (v, w, v2) = (self.profile.v(t), self.profile.w(t), self.profile.v2(t));
            density += v;
            for a in 0..d {
                let ua = x[a] - p[a];
                gradient[a] -= 2.0 * w * ua / h2;
                hessian[(a, a)] -= 2.0 * w / h2;
                for b in 0..d {
                    hessian[(a, b)] += 4.0 * v2 * ua * (x[b] - p[b]) / (h2 * h2);
                }
            }
        });
        KdeDerivatives { density: density * scale, gradient: gradient * scale, hessian: hessian * scale }
    }

    /// Mean-shift image `m(x) = Σ w_j p_j / Σ w_j`, evaluated with weights
    /// shifted by the nearest point so that it never underflows.
    pub fn shift_target(&self, x: &[f64], buf: &mut Vec<usize>) -> Vec<f64> {
        let d = x.len();
        let h2 = self.h * self.h;
        let mut tmin = f64::INFINITY;
        self.for_each_near(x, buf, |p| tmin = tmin.min(sq_dist(x, p) / h2));
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        self.for_each_near(x, buf, |p| {
            let w = (-0.5 * (sq_dist(x, p) / h2 - tmin)).exp();
            den += w;
            for (n, v) in num.iter_mut().zip(p) {
                *n += w * v;
            }
        });
        num.iter().map(|n| n / den).collect()
    }
}

#[derive(Clone, Debug)]
pub struct KdeDerivatives {
    pub density: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Analytic density, gradient and Hessian of the Gaussian-profile estimate.
pub fn kde_eval_grad_hess(points: &[Vec<f64>], h: f64, profile: &KernelProfile, query: &[f64]) -> Result<KdeDerivatives> {
    if query.len() != profile.dim() {
        return invalid("query dimension differs from the kernel dimension");
    }
    Ok(KdeSample::new(points, h, *profile, None)?.eval(query))
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeSet {
    /// Merged modes in lexicographic order.
    pub modes: Vec<Vec<f64>>,
    /// Mode index of every start point; `-1` when its trajectory did not converge.
    pub labels: Vec<i64>,
    /// Number of start points attracted by each mode.
    pub counts: Vec<usize>,
}

impl ModeSet {
    /// Modes weighted by the share of converged start points they attract.
    pub fn to_measure(&self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::from_unnormalized(self.modes.clone(), self.counts.iter().map(|&c| c as f64).collect())
    }
}

fn lex_order(points: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a].iter().zip(&points[b]).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Groups converged limit points within `radius` into modes at their means.
fn merge_limits(limits: &[Option<Vec<f64>>], radius: f64) -> ModeSet {
    let conv: Vec<usize> = (0..limits.len()).filter(|&i| limits[i].is_some()).collect();
    let pts: Vec<Vec<f64>> = conv.iter().map(|&i| limits[i].clone().unwrap_or_default()).collect();
    let groups = single_linkage(&pts, radius);
    let k = groups.iter().max().map_or(0, |m| m + 1);
    let d = pts.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    // Sum in lexicographic order of the limit points so the result does not
    // depend on the order of the start points.
    for i in lex_order(&pts) {
        let g = groups[i];
        counts[g] += 1;
        for (s, v) in sums[g].iter_mut().zip(&pts[i]) {
            *s += v;
        }
    }
    let means: Vec<Vec<f64>> = sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|v| v / c as f64).collect()).collect();
    let order = lex_order(&means);
    let mut rank = vec![0usize; k];
    for (r, &g) in order.iter().enumerate() {
        rank[g] = r;
    }
    let mut labels = vec![-1i64; limits.len()];
    for (j, &i) in conv.iter().enumerate() {
        labels[i] = rank[groups[j]] as i64;
    }
    ModeSet { modes: order.iter().map(|&g| means[g].clone()).collect(), counts: order.iter().map(|&g| counts[g]).collect(), labels }
}

/// Runs mean shift from every start point (default: the sample itself).
pub fn mean_shift(
    points: &[Vec<f64>],
    h: f64,
    profile: &KernelProfile,
    start_points: Option<&[Vec<f64>]>,
    cfg: &ShiftConfig,
) -> Result<ModeSet> {
    let kde = KdeSample::new(points, h, *profile, cfg.cutoff)?;
    let starts = start_points.unwrap_or(points);
    let limits: Vec<Option<Vec<f64>>> = starts
        .par_iter()
        .map_init(Vec::new, |buf, s| {
            let mut x = s.clone();
            for _ in 0..cfg.max_iter {
                let next = kde.shift_target(&x, buf);
                let moved = sq_dist(&next, &x).sqrt();
                x = next;
                if moved < cfg.tol {
                    return Some(x);
                }
            }
            None
        })
        .collect();
    Ok(merge_limits(&limits, cfg.merge_factor * h))
}

/// Mean shift trajectory from one point, with the density at every iterate.
pub fn mean_shift_path(
    points: &[Vec<f64>],
    h: f64,
    profile: &KernelProfile,
    start: &[f64],
    cfg: &ShiftConfig,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let kde = KdeSample::new(points, h, *profile, cfg.cutoff)?;
    let mut buf = Vec::new();
    let mut x = start.to_vec();
    let mut path = vec![(x.clone(), kde.eval(&x).density)];
    for _ in 0..cfg.max_iter {
        let next = kde.shift_target(&x, &mut buf);
        let moved = sq_dist(&next, &x).sqrt();
        x = next;
        path.push((x.clone(), kde.eval(&x).density));
        if moved < cfg.tol {
            break;
        }
    }
    Ok(path)
}

#[derive(Clone, Debug, Serialize)]
pub struct RidgeSet {
    pub points: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
}

/// Projector onto the eigenvectors of the `k` smallest Hessian eigenvalues.
fn low_projector(hessian: &DMatrix<f64>, k: usize, at: &[f64]) -> Result<DMatrix<f64>> {
    if hessian.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen { location: at.to_vec() });
    }
    let eig = SymmetricEigen::new(hessian.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let d = hessian.nrows();
    let mut proj = DMatrix::zeros(d, d);
    for &j in order.iter().take(k) {
        let v = eig.eigenvectors.column(j);
        proj += v * v.transpose();
    }
    Ok(proj)
}

/// One SCMS update at `x`: the mean-shift step projected onto the span of the
/// `d − ridge_dim` Hessian eigenvectors with the smallest eigenvalues.
/// Returns the new point and the projected gradient norm at `x`.
fn scms_update(kde: &KdeSample, x: &[f64], ridge_dim: usize, buf: &mut Vec<usize>) -> Result<(Vec<f64>, f64, f64)> {
    let d = x.len();
    let der = kde.eval(x);
    let proj = low_projector(&der.hessian, d - ridge_dim, x)?;
    let target = kde.shift_target(x, buf);
    let ms = DVector::from_iterator(d, target.iter().zip(x).map(|(t, v)| t - v));
    let step = &proj * ms;
    let grad_norm = (&proj * &der.gradient).norm();
    let next = x.iter().zip(step.iter()).map(|(v, s)| v + s).collect();
    Ok((next, grad_norm, step.norm()))
}

/// Subspace-constrained mean shift toward `ridge_dim`-dimensional ridges.
/// A trajectory stops once both the projected gradient and the projected step
/// are below `cfg.tol`.
pub fn scms(
    points: &[Vec<f64>],
    h: f64,
    profile: &KernelProfile,
    ridge_dim: usize,
    start_points: Option<&[Vec<f64>]>,
    cfg: &ShiftConfig,
) -> Result<RidgeSet> {
    if ridge_dim >= profile.dim() {
        return invalid("ridge dimension must be smaller than the data dimension");
    }
    let kde = KdeSample::new(points, h, *profile, cfg.cutoff)?;
    let starts = start_points.unwrap_or(points);
    let runs: Vec<(Vec<f64>, bool)> = starts
        .par_iter()
        .map_init(Vec::new, |buf, s| -> Result<(Vec<f64>, bool)> {
            let mut x = s.clone();
            for _ in 0..cfg.max_iter {
                let (next, grad, step) = scms_update(&kde, &x, ridge_dim, buf)?;
                if grad < cfg.tol && step < cfg.tol {
                    return Ok((x, true));
                }
                x = next;
            }
            Ok((x, false))
        })
        .collect::<Result<_>>()?;
    let (points, converged) = runs.into_iter().unzip();
    Ok(RidgeSet { points, converged })
}

/// One further SCMS update and the projected gradient norm at `x`.
pub fn scms_probe(points: &[Vec<f64>], h: f64, profile: &KernelProfile, ridge_dim: usize, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let kde = KdeSample::new(points, h, *profile, None)?;
    let (next, grad, _) = scms_update(&kde, x, ridge_dim, &mut Vec::new())?;
    Ok((next, grad))
}
