//! Posterior accumulation shared by both EM schemes.
//!
//! For a quadrature rule with nodes `p` and prior masses `m_p` (base weight
//! times prior density), observation `i` has posterior masses
//! `f_i(p) = m_p φ_i(p) / Σ_q m_q φ_i(q)`. The E-step returns the field
//! `W_p = Σ_i f_i(p)` together with the discretized log-likelihood.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{dot, dot_long, log_gaussian, Dataset};
use crate::quadrature::QuadratureRule;

const TARGET_CHUNKS: usize = 64;

/// Contiguous observation ranges that depend on `n` only, so parallel
/// reductions give bit-identical results for any thread count.
pub(crate) fn fixed_chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    let size = n.div_ceil(TARGET_CHUNKS).max(1);
    (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect()
}

#[derive(Clone, Debug)]
pub struct EStep {
    /// `W_p = Σ_i f_i(p)`; sums to `n`.
    pub field: Vec<f64>,
    /// `Σ_i ln Σ_p m_p φ_i(p)`.
    pub loglik: f64,
    /// `Σ_i Σ_p f_i(p) ln φ_i(p)`, when requested.
    pub expected_log_lik: Option<f64>,
}

struct ChunkOut {
    ratio: Vec<f64>,
    direct: Option<Vec<f64>>,
    loglik: f64,
    elog: f64,
}

/// Runs the E-step. `ln_mass`, when given, is used for observations whose
/// normalizer underflows with the plain masses.
pub(crate) fn posterior_field(
    rule: &QuadratureRule,
    mass: &[f64],
    ln_mass: Option<&[f64]>,
    data: &Dataset,
    sigma: f64,
    expected_log: bool,
) -> Result<EStep> {
    let nodes = rule.len();
    let coords = if expected_log { Some(rule.coords()) } else { None };
    let dim = rule.dim();
    let inv_var = 1.0 / (sigma * sigma);
    let log_norm = log_gaussian(0.0, sigma);

    let chunks: Vec<ChunkOut> = fixed_chunks(data.len())
        .into_par_iter()
        .map(|range| -> Result<ChunkOut> {
            let mut out = ChunkOut { ratio: vec![0.0; nodes], direct: None, loglik: 0.0, elog: 0.0 };
            let mut phi = vec![0.0; nodes];
            for i in range {
                let (x, y) = (data.x(i), data.y(i));
                let peak = rule.fill_scaled_likelihood(x, y, sigma, &mut phi);
                let z = dot_long(&phi, mass);
                if z > 0.0 && z.is_finite() {
                    out.loglik += z.ln() + peak;
                    let inv_z = 1.0 / z;
                    for (r, p) in out.ratio.iter_mut().zip(&phi) {
                        *r += p * inv_z;
                    }
                    if let Some(c) = &coords {
                        let mut e = 0.0;
                        for ((p, m), node) in phi.iter().zip(mass).zip(c.chunks_exact(dim)) {
                            if *p > 0.0 && *m > 0.0 {
                                let r = y - dot(x, node);
                                e += p * m * r * r;
                            }
                        }
                        out.elog += log_norm - 0.5 * inv_var * e * inv_z;
                    }
                    continue;
                }
                let Some(lm) = ln_mass else {
                    return Err(Error::ZeroNormalizer { index: i });
                };
                // Log-space fallback: f_i(p) ∝ exp(ln φ_i(p) + ln m_p).
                let mut logs: Vec<f64> = phi.iter().zip(lm).map(|(p, l)| p.ln() + peak + l).collect();
                let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if top == f64::NEG_INFINITY || !top.is_finite() {
                    return Err(Error::ZeroNormalizer { index: i });
                }
                logs.iter_mut().for_each(|l| *l = (*l - top).exp());
                let z: f64 = logs.iter().sum();
                out.loglik += z.ln() + top;
                let direct = out.direct.get_or_insert_with(|| vec![0.0; nodes]);
                for (dst, f) in direct.iter_mut().zip(&logs) {
                    *dst += f / z;
                }
                if let Some(c) = &coords {
                    let e: f64 = logs
                        .iter()
                        .zip(c.chunks_exact(dim))
                        .map(|(f, node)| {
                            let r = y - dot(x, node);
                            f * r * r
                        })
                        .sum();
                    out.elog += log_norm - 0.5 * inv_var * e / z;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut ratio = vec![0.0; nodes];
    let mut direct: Option<Vec<f64>> = None;
    let mut loglik = 0.0;
    let mut elog = 0.0;
    for c in chunks {
        for (a, b) in ratio.iter_mut().zip(&c.ratio) {
            *a += b;
        }
        if let Some(d) = c.direct {
            let acc = direct.get_or_insert_with(|| vec![0.0; nodes]);
            for (a, b) in acc.iter_mut().zip(&d) {
                *a += b;
            }
        }
        loglik += c.loglik;
        elog += c.elog;
    }
    let mut field: Vec<f64> = ratio.iter().zip(mass).map(|(r, m)| r * m).collect();
    if let Some(d) = direct {
        for (f, extra) in field.iter_mut().zip(&d) {
            *f += extra;
        }
    }
    Ok(EStep { field, loglik, expected_log_lik: expected_log.then_some(elog) })
}
