//! EM over gridded densities: each step replaces `g` by the average of the
//! per-observation posterior densities under `g`.

use std::time::Instant;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::estep::{posterior_field, EStep};
use crate::model::{Dataset, FitReport, GridDensity};
use crate::quadrature::QuadratureRule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NpmleConfig {
    /// Stop once the grid-L2 distance between iterates falls below this.
    pub l2_tol: f64,
    pub max_iter: usize,
}

impl Default for NpmleConfig {
    fn default() -> Self {
        Self { l2_tol: 1e-5, max_iter: 500 }
    }
}

fn e_step(g: &GridDensity, data: &Dataset) -> Result<EStep> {
    let sigma = data.require_sigma()?;
    if g.grid().dim() != data.dim() {
        return invalid("grid and dataset dimensions differ");
    }
    let vol = g.grid().cell_volume();
    let mass: Vec<f64> = g.values().iter().map(|v| v * vol).collect();
    let rule = QuadratureRule::Grid(g.grid().clone());
    posterior_field(&rule, &mass, None, data, sigma, false)
}

fn density_from_field(g: &GridDensity, field: &[f64], n: usize) -> Result<GridDensity> {
    let scale = 1.0 / (n as f64 * g.grid().cell_volume());
    GridDensity::from_unnormalized(g.grid().clone(), field.iter().map(|w| w * scale).collect())
}

/// Posterior density of `β` for one observation under prior `g`.
pub fn posterior_density(g: &GridDensity, x: &[f64], y: f64, sigma: f64) -> Result<GridDensity> {
    let one = Dataset::new(vec![x.to_vec()], vec![y], Some(sigma))?;
    let es = e_step(g, &one)?;
    density_from_field(g, &es.field, 1)
}

/// One EM update `g' = (1/n) Σ_i posterior_i`.
pub fn em_npmle_step(g: &GridDensity, data: &Dataset) -> Result<GridDensity> {
    let es = e_step(g, data)?;
    density_from_field(g, &es.field, data.len())
}

/// Grid-discretized incomplete log-likelihood of `g`.
pub fn grid_loglik(g: &GridDensity, data: &Dataset) -> Result<f64> {
    Ok(e_step(g, data)?.loglik)
}

/// The `g`-dependent part of the expected complete log-likelihood,
/// `Σ_i Σ_p f_i(p) ln candidate(p)`, with posteriors `f_i` taken under `current`.
pub fn expected_complete_loglik(candidate: &GridDensity, current: &GridDensity, data: &Dataset) -> Result<f64> {
    let es = e_step(current, data)?;
    let mut total = 0.0;
    for (w, c) in es.field.iter().zip(candidate.values()) {
        if *w > 0.0 {
            total += w * c.ln();
        }
    }
    Ok(total)
}

/// Iterates [`em_npmle_step`] from `init` until the grid-L2 change drops below
/// `cfg.l2_tol` or `cfg.max_iter` steps were taken.
pub fn run_em_npmle(data: &Dataset, init: GridDensity, cfg: &NpmleConfig) -> Result<FitReport<GridDensity>> {
    if !(cfg.l2_tol > 0.0) {
        return invalid("l2_tol must be positive");
    }
    let start = Instant::now();
    let mut g = init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        let es = e_step(&g, data)?;
        trace.push(es.loglik);
        let next = density_from_field(&g, &es.field, data.len())?;
        let change = next.l2_distance(&g);
        g = next;
        iterations += 1;
        if change < cfg.l2_tol {
            converged = true;
            break;
        }
    }
    trace.push(grid_loglik(&g, data)?);
    Ok(FitReport { estimator: g, loglik_trace: trace, iterations, converged, wall_time_secs: start.elapsed().as_secs_f64() })
}
