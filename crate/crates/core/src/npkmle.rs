//! EM over kernel density estimates with movable particles, and its
//! generalized (single inner step) variant.
//!
//! With posteriors `f_i` computed under the current particles `β^(t)` on a
//! quadrature rule, the expected complete log-likelihood splits as
//! `Q(ν) = Σ_i E_{f_i}[ln φ_i] + Σ_p W_p ln g_ν(p)` with `W_p = Σ_i f_i(p)`.
//! The field `W` is computed once per outer iteration; every inner step then
//! costs one pass over (node, particle) pairs.
//!
//! For the Gaussian profile the inner update is the fixed-point map
//! `ν_ℓ ← A_ℓ / C_ℓ` with
//! `C_ℓ = ½ Σ_p W_p k_ℓ(p) / K(p)`, `A_ℓ = ½ Σ_p W_p k_ℓ(p) p / K(p)`,
//! `k_ℓ(p) = exp(−‖p − ν_ℓ‖² / 2h²)` and `K = Σ_ℓ k_ℓ`.
//! The exact gradient is `∇_ℓ Q = (2/h²) (A_ℓ − C_ℓ ν_ℓ)`, and one step raises
//! `Q` by at least `(1/h²) Σ_ℓ C_ℓ ‖Δν_ℓ‖²`.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::estep::{fixed_chunks, posterior_field};
use crate::kernels::KernelProfile;
use crate::model::{dot_long, sq_dist, Dataset, DiscreteMeasure, FitReport, ParticleKde};
use crate::quadrature::{IntegrationPolicy, QuadratureGrid, QuadratureRule};
use crate::rng;

/// Kernel sums below this are recomputed in log space.
const TINY: f64 = 1e-280;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum InnerMode {
    /// Iterate the inner map until the particles stop moving.
    FullEm,
    /// Take exactly one inner step per outer iteration.
    Gem,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NpkmleConfig {
    pub mode: InnerMode,
    /// Inner loop stops when no particle moves farther than this.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Outer loop stops when the relative log-likelihood change is below
    /// `outer_tol` and no particle moved farther than `displacement_tol`.
    pub outer_tol: f64,
    pub displacement_tol: f64,
    pub outer_max_iter: usize,
    pub policy: IntegrationPolicy,
    /// Particles closer than `merge_factor · h` form one output atom.
    pub merge_factor: f64,
    /// Record `Q` along every inner trajectory.
    pub track_q: bool,
}

impl NpkmleConfig {
    pub fn new(mode: InnerMode, policy: IntegrationPolicy) -> Self {
        Self {
            mode,
            inner_tol: 1e-5,
            inner_max_iter: 500,
            outer_tol: 1e-7,
            displacement_tol: 1e-4,
            outer_max_iter: 200,
            policy,
            merge_factor: 0.05,
            track_q: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.inner_tol, self.outer_tol, self.displacement_tol, self.merge_factor];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return invalid("tolerances and the merge factor must be positive");
        }
        if self.inner_max_iter == 0 {
            return invalid("inner_max_iter must be at least 1");
        }
        Ok(())
    }
}

/// Flat row-major copy of a particle set.
fn flatten(points: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    if points.is_empty() || points.iter().any(|p| p.len() != dim) {
        return invalid(format!("particles must be nonempty and {dim}-dimensional"));
    }
    Ok(points.concat())
}

/// Per-axis factors `exp(−(c_a(j) − ν_{m,a})² / 2h²)`, laid out `[j][m]`.
struct Tables {
    per_axis: Vec<Vec<f64>>,
    coords: Vec<Vec<f64>>,
    n_p: usize,
}

impl Tables {
    fn new(grid: &QuadratureGrid, nu: &[f64], n_p: usize, h: f64) -> Self {
        let dim = grid.dim();
        let inv = 0.5 / (h * h);
        let coords: Vec<Vec<f64>> = (0..dim).map(|a| grid.axis_coords(a)).collect();
        let per_axis = coords
            .iter()
            .enumerate()
            .map(|(a, cs)| {
                let mut t = Vec::with_capacity(cs.len() * n_p);
                for c in cs {
                    t.extend(nu.chunks_exact(dim).map(|p| {
                        let diff = c - p[a];
                        (-inv * diff * diff).exp()
                    }));
                }
                t
            })
            .collect();
        Self { per_axis, coords, n_p }
    }

    fn row(&self, axis: usize, j: usize) -> &[f64] {
        &self.per_axis[axis][j * self.n_p..(j + 1) * self.n_p]
    }

    /// Product of the factors of every axis but the last, for one grid row.
    fn prefix(&self, grid: &QuadratureGrid, row: usize, idx: &mut [usize], out: &mut [f64]) {
        let last = grid.dim() - 1;
        grid.multi_index(row * grid.nodes_per_dim()[last], idx);
        out.fill(1.0);
        for (a, &j) in idx.iter().enumerate().take(last) {
            for (o, f) in out.iter_mut().zip(self.row(a, j)) {
                *o *= f;
            }
        }
    }
}

/// Log-space kernel sum at one node; fills `r_m = k_m(p)/e^{-t_min}` and
/// returns `(ln K(p), Σ r)`.
fn direct_node(p: &[f64], nu: &[f64], h: f64, r: &mut [f64]) -> (f64, f64) {
    let inv = 0.5 / (h * h);
    let dim = p.len();
    let mut tmin = f64::INFINITY;
    for (rm, q) in r.iter_mut().zip(nu.chunks_exact(dim)) {
        *rm = inv * sq_dist(p, q);
        tmin = tmin.min(*rm);
    }
    let mut s = 0.0;
    for rm in r.iter_mut() {
        *rm = (-(*rm - tmin)).exp();
        s += *rm;
    }
    (s.ln() - tmin, s)
}

/// `ln K(p)` at every node of the rule.
fn ln_kernel_sums(rule: &QuadratureRule, nu: &[f64], n_p: usize, h: f64) -> Vec<f64> {
    let dim = rule.dim();
    match rule {
        QuadratureRule::Grid(grid) => {
            let tables = Tables::new(grid, nu, n_p, h);
            let last = dim - 1;
            let len_last = grid.nodes_per_dim()[last];
            let rows = grid.len() / len_last;
            let parts: Vec<Vec<f64>> = fixed_chunks(rows)
                .into_par_iter()
                .map(|range| {
                    let mut idx = vec![0; dim];
                    let mut pre = vec![0.0; n_p];
                    let mut scratch = vec![0.0; n_p];
                    let mut out = Vec::with_capacity(range.len() * len_last);
                    for row in range {
                        tables.prefix(grid, row, &mut idx, &mut pre);
                        for k in 0..len_last {
                            let s = dot_long(&pre, tables.row(last, k));
                            if s > TINY {
                                out.push(s.ln());
                            } else {
                                let p = grid.node(row * len_last + k);
                                out.push(direct_node(&p, nu, h, &mut scratch).0);
                            }
                        }
                    }
                    out
                })
                .collect();
            parts.concat()
        }
        QuadratureRule::Scattered { coords, .. } => {
            coords.par_chunks(dim).map_init(|| vec![0.0; n_p], |scratch, p| direct_node(p, nu, h, scratch).0).collect()
        }
    }
}

/// Result of one sweep over (node, particle) pairs.
struct Sweep {
    /// `Σ_p W_p ln K(p)`.
    weighted_ln_k: f64,
    /// `2 C_ℓ` and `2 A_ℓ` (row-major), when moments were requested.
    c2: Vec<f64>,
    a2: Vec<f64>,
}

fn sweep(rule: &QuadratureRule, weights: &[f64], nu: &[f64], n_p: usize, h: f64, moments: bool) -> Sweep {
    let dim = rule.dim();
    let m_len = if moments { n_p } else { 0 };
    let parts: Vec<Sweep> = match rule {
        QuadratureRule::Grid(grid) => {
            let tables = Tables::new(grid, nu, n_p, h);
            let last = dim - 1;
            let len_last = grid.nodes_per_dim()[last];
            let rows = grid.len() / len_last;
            let last_coords = &tables.coords[last];
            fixed_chunks(rows)
                .into_par_iter()
                .map(|range| {
                    let mut acc = Sweep { weighted_ln_k: 0.0, c2: vec![0.0; m_len], a2: vec![0.0; m_len * dim] };
                    let mut idx = vec![0; dim];
                    let mut pre = vec![0.0; n_p];
                    let mut t0 = vec![0.0; m_len];
                    let mut tl = vec![0.0; m_len];
                    let mut scratch = vec![0.0; n_p];
                    let mut ratio = vec![0.0; len_last];
                    for row in range {
                        let w_row = &weights[row * len_last..(row + 1) * len_last];
                        if w_row.iter().all(|w| *w <= 0.0) {
                            continue;
                        }
                        tables.prefix(grid, row, &mut idx, &mut pre);
                        let mut any_regular = false;
                        for k in 0..len_last {
                            ratio[k] = 0.0;
                            let w = w_row[k];
                            if w <= 0.0 {
                                continue;
                            }
                            let s = dot_long(&pre, tables.row(last, k));
                            if s > TINY {
                                acc.weighted_ln_k += w * s.ln();
                                ratio[k] = w / s;
                                any_regular = true;
                                continue;
                            }
                            let p = grid.node(row * len_last + k);
                            let (ln_k, total) = direct_node(&p, nu, h, &mut scratch);
                            acc.weighted_ln_k += w * ln_k;
                            if moments {
                                let rho = w / total;
                                for m in 0..n_p {
                                    let f = rho * scratch[m];
                                    acc.c2[m] += f;
                                    for a in 0..dim {
                                        acc.a2[m * dim + a] += f * p[a];
                                    }
                                }
                            }
                        }
                        if !moments || !any_regular {
                            continue;
                        }
                        t0.fill(0.0);
                        tl.fill(0.0);
                        for k in 0..len_last {
                            let rho = ratio[k];
                            if rho == 0.0 {
                                continue;
                            }
                            let rho_c = rho * last_coords[k];
                            for ((a0, al), e) in t0.iter_mut().zip(tl.iter_mut()).zip(tables.row(last, k)) {
                                *a0 += rho * e;
                                *al += rho_c * e;
                            }
                        }
                        let prefix_coords: Vec<f64> = (0..last).map(|a| tables.coords[a][idx[a]]).collect();
                        for m in 0..n_p {
                            let base = pre[m] * t0[m];
                            acc.c2[m] += base;
                            for (a, c) in prefix_coords.iter().enumerate() {
                                acc.a2[m * dim + a] += c * base;
                            }
                            acc.a2[m * dim + last] += pre[m] * tl[m];
                        }
                    }
                    acc
                })
                .collect()
        }
        QuadratureRule::Scattered { coords, .. } => {
            let nodes = weights.len();
            fixed_chunks(nodes)
                .into_par_iter()
                .map(|range| {
                    let mut acc = Sweep { weighted_ln_k: 0.0, c2: vec![0.0; m_len], a2: vec![0.0; m_len * dim] };
                    let mut scratch = vec![0.0; n_p];
                    for k in range {
                        let w = weights[k];
                        if w <= 0.0 {
                            continue;
                        }
                        let p = &coords[k * dim..(k + 1) * dim];
                        let (ln_k, total) = direct_node(p, nu, h, &mut scratch);
                        acc.weighted_ln_k += w * ln_k;
                        if moments {
                            let rho = w / total;
                            for m in 0..n_p {
                                let f = rho * scratch[m];
                                acc.c2[m] += f;
                                for a in 0..dim {
                                    acc.a2[m * dim + a] += f * p[a];
                                }
                            }
                        }
                    }
                    acc
                })
                .collect()
        }
    };
    let mut total = Sweep { weighted_ln_k: 0.0, c2: vec![0.0; m_len], a2: vec![0.0; m_len * dim] };
    for part in parts {
        total.weighted_ln_k += part.weighted_ln_k;
        for (a, b) in total.c2.iter_mut().zip(&part.c2) {
            *a += b;
        }
        for (a, b) in total.a2.iter_mut().zip(&part.a2) {
            *a += b;
        }
    }
    total
}

/// Posterior field of the E-step under particles `β^(t)`.
#[derive(Clone, Debug)]
pub struct PosteriorField {
    rule: QuadratureRule,
    weights: Vec<f64>,
    /// `Σ_i E_{f_i}[ln φ_i]`, the part of `Q` that does not depend on `ν`.
    constant: f64,
    /// Quadrature log-likelihood of the estimate built on `β^(t)`.
    loglik: f64,
    n_p: usize,
    h: f64,
    dim: usize,
}

impl PosteriorField {
    /// Computes posteriors under the kernel estimate on `beta_t` using `rule`.
    pub fn new(beta_t: &[Vec<f64>], data: &Dataset, h: f64, profile: &KernelProfile, rule: QuadratureRule) -> Result<Self> {
        Self::build(beta_t, data, h, profile, rule, true)
    }

    fn build(
        beta_t: &[Vec<f64>],
        data: &Dataset,
        h: f64,
        profile: &KernelProfile,
        rule: QuadratureRule,
        with_constant: bool,
    ) -> Result<Self> {
        let sigma = data.require_sigma()?;
        let dim = data.dim();
        if profile.dim() != dim || rule.dim() != dim {
            return invalid("kernel, quadrature and data dimensions differ");
        }
        if !(h > 0.0) {
            return invalid("bandwidth must be positive");
        }
        let flat = flatten(beta_t, dim)?;
        let n_p = beta_t.len();
        // ln of (base weight × kernel estimate density) at every node.
        let ln_norm = profile.norm().ln() - (n_p as f64).ln() - dim as f64 * h.ln();
        let ln_mass: Vec<f64> = match &rule {
            QuadratureRule::Grid(g) => {
                let ln_vol = g.cell_volume().ln();
                ln_kernel_sums(&rule, &flat, n_p, h).into_iter().map(|l| l + ln_norm + ln_vol).collect()
            }
            // Nodes drawn from the estimate itself carry equal mass.
            QuadratureRule::Scattered { base, .. } => vec![-(base.len() as f64).ln(); base.len()],
        };
        let mass: Vec<f64> = ln_mass.iter().map(|l| l.exp()).collect();
        let es = posterior_field(&rule, &mass, Some(&ln_mass), data, sigma, with_constant)?;
        Ok(Self { rule, weights: es.field, constant: es.expected_log_lik.unwrap_or(f64::NAN), loglik: es.loglik, n_p, h, dim })
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    fn ln_g_offset(&self) -> f64 {
        KernelProfile::gaussian(self.dim).map_or(f64::NAN, |p| p.norm().ln()) - (self.n_p as f64).ln() - self.dim as f64 * self.h.ln()
    }

    fn check(&self, nu: &[Vec<f64>]) -> Result<Vec<f64>> {
        if nu.len() != self.n_p {
            return invalid(format!("expected {} particles, got {}", self.n_p, nu.len()));
        }
        flatten(nu, self.dim)
    }

    fn q_from(&self, weighted_ln_k: f64) -> f64 {
        let total_w: f64 = self.weights.iter().sum();
        self.constant + weighted_ln_k + total_w * self.ln_g_offset()
    }
}

/// Expected complete log-likelihood `Q(G_ν; G^(t))` of particles `nu`.
pub fn q_function(field: &PosteriorField, nu: &[Vec<f64>]) -> Result<f64> {
    let flat = field.check(nu)?;
    let s = sweep(&field.rule, &field.weights, &flat, field.n_p, field.h, false);
    Ok(field.q_from(s.weighted_ln_k))
}

/// One synchronous fixed-point update of every particle.
#[derive(Clone, Debug)]
pub struct InnerStep {
    pub next: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    /// `Q` at the particles the step started from.
    pub q_before: f64,
}

impl InnerStep {
    /// `∇Q = (2/h²)(A − C ν)` at the starting particles.
    pub fn gradient(&self, nu: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
        let s = 2.0 / (h * h);
        nu.iter().zip(&self.a).zip(&self.c).map(|((p, a), c)| p.iter().zip(a).map(|(pv, av)| s * (av - c * pv)).collect()).collect()
    }

    /// Guaranteed increase `(1/h²) Σ_ℓ C_ℓ ‖ν'_ℓ − ν_ℓ‖²`.
    pub fn ascent_bound(&self, nu: &[Vec<f64>], h: f64) -> f64 {
        self.c.iter().zip(&self.next).zip(nu).map(|((c, a), b)| c * sq_dist(a, b)).sum::<f64>() / (h * h)
    }
}

/// `ν_ℓ ← A_ℓ / C_ℓ` for all `ℓ` from the common current `ν`. A particle with
/// `C_ℓ = 0` (no posterior mass within reach) stays where it is.
pub fn inner_step_xi(field: &PosteriorField, nu: &[Vec<f64>]) -> Result<InnerStep> {
    let flat = field.check(nu)?;
    let dim = field.dim;
    let s = sweep(&field.rule, &field.weights, &flat, field.n_p, field.h, true);
    let mut next = Vec::with_capacity(field.n_p);
    let mut a_out = Vec::with_capacity(field.n_p);
    let mut c_out = Vec::with_capacity(field.n_p);
    for (m, p) in nu.iter().enumerate() {
        let c = 0.5 * s.c2[m];
        let a: Vec<f64> = s.a2[m * dim..(m + 1) * dim].iter().map(|v| 0.5 * v).collect();
        if c > 0.0 && c.is_finite() {
            next.push(a.iter().map(|v| v / c).collect());
        } else {
            next.push(p.clone());
        }
        a_out.push(a);
        c_out.push(c);
    }
    Ok(InnerStep { next, c: c_out, a: a_out, q_before: field.q_from(s.weighted_ln_k) })
}

#[derive(Clone, Debug)]
pub struct MStep {
    pub particles: Vec<Vec<f64>>,
    /// `Q` at each inner iterate (empty unless tracking was requested; the
    /// final entry is then `Q` of the returned particles).
    pub q_trace: Vec<f64>,
    pub inner_iterations: usize,
    pub converged: bool,
}

fn max_displacement(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| sq_dist(p, q)).fold(0.0, f64::max).sqrt()
}

/// Inner loop from `ν^(0) = β^(t)`: to convergence in full-EM mode, a single
/// step in GEM mode.
pub fn m_step(field: &PosteriorField, beta_t: &[Vec<f64>], cfg: &NpkmleConfig) -> Result<MStep> {
    cfg.validate()?;
    let mut nu = beta_t.to_vec();
    let mut q_trace = Vec::new();
    let limit = match cfg.mode {
        InnerMode::FullEm => cfg.inner_max_iter,
        InnerMode::Gem => 1,
    };
    let mut converged = cfg.mode == InnerMode::Gem;
    let mut iterations = 0;
    for _ in 0..limit {
        let step = inner_step_xi(field, &nu)?;
        if cfg.track_q {
            q_trace.push(step.q_before);
        }
        let moved = max_displacement(&step.next, &nu);
        nu = step.next;
        iterations += 1;
        if cfg.mode == InnerMode::FullEm && moved < cfg.inner_tol {
            converged = true;
            break;
        }
    }
    if cfg.track_q {
        q_trace.push(q_function(field, &nu)?);
    }
    Ok(MStep { particles: nu, q_trace, inner_iterations: iterations, converged })
}

/// Single-linkage merge of particles closer than `merge_radius`; each
/// connected component becomes an atom at its mean with weight
/// `size / n_p`. Atoms are returned in lexicographic order.
pub fn aggregate_atoms(kde: &ParticleKde, merge_radius: f64) -> Result<DiscreteMeasure> {
    if !(merge_radius > 0.0) {
        return invalid("merge radius must be positive");
    }
    let pts = kde.points();
    let labels = single_linkage(pts, merge_radius);
    let groups = labels.iter().max().map_or(0, |m| m + 1);
    let dim = pts[0].len();
    let mut sums = vec![vec![0.0; dim]; groups];
    let mut counts = vec![0usize; groups];
    for (p, &l) in pts.iter().zip(&labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut atoms: Vec<(Vec<f64>, f64)> =
        sums.into_iter().zip(counts).map(|(s, c)| (s.iter().map(|v| v / c as f64).collect(), c as f64 / pts.len() as f64)).collect();
    atoms.sort_by(|a, b| a.0.iter().zip(&b.0).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let (a, w) = atoms.into_iter().unzip();
    DiscreteMeasure::from_unnormalized(a, w)
}

/// Connected components of the graph joining points closer than `radius`,
/// numbered in order of first appearance.
pub(crate) fn single_linkage(pts: &[Vec<f64>], radius: f64) -> Vec<usize> {
    let n = pts.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pts[a][0].total_cmp(&pts[b][0]));
    let r2 = radius * radius;
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if pts[j][0] - pts[i][0] >= radius {
                break;
            }
            if sq_dist(&pts[i], &pts[j]) < r2 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut ids = vec![usize::MAX; n];
    let mut next = 0;
    (0..n)
        .map(|i| {
            let r = find(&mut parent, i);
            if ids[r] == usize::MAX {
                ids[r] = next;
                next += 1;
            }
            ids[r]
        })
        .collect()
}

/// Final state of a particle EM run.
#[derive(Clone, Debug, Serialize)]
pub struct NpkmleEstimate {
    pub kde: ParticleKde,
    pub atoms: DiscreteMeasure,
    pub inner_iterations: Vec<usize>,
}

fn rule_for(policy: &IntegrationPolicy, particles: &[Vec<f64>], h: f64, profile: &KernelProfile, outer: usize) -> Result<QuadratureRule> {
    match policy {
        IntegrationPolicy::Grid(g) => Ok(QuadratureRule::Grid(g.clone())),
        IntegrationPolicy::MonteCarlo { samples, seed } => {
            let kde = ParticleKde::new(particles.to_vec(), h, *profile)?;
            let draws = kde.sample(*samples, rng::derive_indexed(*seed, "mc-rule", outer as u64));
            let base = draws.iter().map(|p| 1.0 / (*samples as f64 * kde.density(p))).collect();
            Ok(QuadratureRule::Scattered { dim: profile.dim(), coords: draws.concat(), base })
        }
    }
}

/// Alternates E-steps and [`m_step`] from `beta_0` until the outer stopping
/// rule holds or `cfg.outer_max_iter` M-steps were taken. The trace holds the
/// quadrature log-likelihood of every iterate, starting with `beta_0`.
pub fn run_em_npkmle(
    data: &Dataset,
    beta_0: &[Vec<f64>],
    h: f64,
    profile: &KernelProfile,
    cfg: &NpkmleConfig,
) -> Result<FitReport<NpkmleEstimate>> {
    cfg.validate()?;
    let start = Instant::now();
    let mut particles = beta_0.to_vec();
    let mut field = PosteriorField::build(&particles, data, h, profile, rule_for(&cfg.policy, &particles, h, profile, 0)?, cfg.track_q)?;
    let mut trace = vec![field.loglik];
    let mut inner_iterations = Vec::new();
    let mut converged = false;
    for outer in 0..cfg.outer_max_iter {
        let ms = m_step(&field, &particles, cfg)?;
        inner_iterations.push(ms.inner_iterations);
        let moved = max_displacement(&ms.particles, &particles);
        particles = ms.particles;
        let rule = rule_for(&cfg.policy, &particles, h, profile, outer + 1)?;
        field = PosteriorField::build(&particles, data, h, profile, rule, cfg.track_q)?;
        let (prev, cur) = (trace[trace.len() - 1], field.loglik);
        trace.push(cur);
        let rel = (cur - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
        if rel < cfg.outer_tol && moved < cfg.displacement_tol {
            converged = true;
            break;
        }
    }
    let kde = ParticleKde::new(particles, h, *profile)?;
    let atoms = aggregate_atoms(&kde, cfg.merge_factor * h)?;
    Ok(FitReport {
        iterations: inner_iterations.len(),
        estimator: NpkmleEstimate { kde, atoms, inner_iterations },
        loglik_trace: trace,
        converged,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
