//! K-fold cross-validation of the noise scale.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::{incomplete_loglik, Dataset, MarginalDensity};
use crate::rng::stream;

/// A fitted prior whose marginal likelihood can score held-out data.
pub type FittedPrior = Box<dyn MarginalDensity + Send + Sync>;

/// Splits `0..n` into `folds` parts by a seeded shuffle: fold `c` receives the
/// shuffled positions congruent to `c` modulo `folds`. Each fold is sorted.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return invalid(format!("need 2 <= folds <= n, got {folds} folds for n = {n}"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, "folds"));
    let mut out = vec![Vec::with_capacity(n / folds + 1); folds];
    for (j, &i) in perm.iter().enumerate() {
        out[j % folds].push(i);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(out)
}

/// Sample standard deviation of the residuals of a pooled least-squares fit.
pub fn pooled_residual_sd(data: &Dataset) -> Result<f64> {
    let (n, d) = (data.len(), data.dim());
    if n < 2 {
        return invalid("need at least two observations");
    }
    let x = DMatrix::from_fn(n, d, |i, j| data.x(i)[j]);
    let y = DVector::from_column_slice(data.ys());
    let coef = x.clone().svd(true, true).solve(&y, 1e-12).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let r = y - x * coef;
    let mean = r.mean();
    Ok((r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt())
}

/// `count` log-spaced values over `[0.05, 2]` times the pooled residual SD.
pub fn default_sigma_grid(data: &Dataset, count: usize) -> Result<Vec<f64>> {
    let s = pooled_residual_sd(data)?;
    if !(s > 0.0) {
        return invalid("residual spread is zero; supply sigma candidates explicitly");
    }
    log_spaced(0.05 * s, 2.0 * s, count)
}

pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || count == 0 {
        return invalid("log-spaced grid needs 0 < lo <= hi and count >= 1");
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..count).map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp()).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct CvPoint {
    pub sigma: f64,
    /// Negative held-out log-likelihood summed over folds; absent if any fold failed.
    pub score: Option<f64>,
    pub failed_folds: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CvOutcome {
    pub sigma_hat: f64,
    pub curve: Vec<CvPoint>,
}

/// For every candidate and fold, fits on the complement (with the candidate as
/// known noise scale) and scores the held-out fold. Returns the candidate with
/// the smallest total negative log-likelihood.
pub fn cv_sigma<F>(data: &Dataset, folds: usize, sigma_grid: &[f64], fitter: F, seed: u64) -> Result<CvOutcome>
where
    F: Fn(&Dataset, f64) -> Result<FittedPrior> + Sync,
{
    if sigma_grid.is_empty() || sigma_grid.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return invalid("sigma candidates must be positive and finite");
    }
    let parts = fold_assignment(data.len(), folds, seed)?;
    let mut train_idx = Vec::with_capacity(folds);
    for c in 0..folds {
        let mut mask = vec![true; data.len()];
        parts[c].iter().for_each(|&i| mask[i] = false);
        train_idx.push((0..data.len()).filter(|&i| mask[i]).collect::<Vec<_>>());
    }
    let cells: Vec<(usize, usize)> = (0..sigma_grid.len()).flat_map(|s| (0..folds).map(move |c| (s, c))).collect();
    let results: Vec<Option<f64>> = cells
        .par_iter()
        .map(|&(s, c)| {
            let sigma = sigma_grid[s];
            let run = || -> Result<f64> {
                let train = data.subset(&train_idx[c])?.with_sigma(sigma)?;
                let test = data.subset(&parts[c])?.with_sigma(sigma)?;
                let g = fitter(&train, sigma)?;
                let ll = incomplete_loglik(g.as_ref(), &test)?;
                if ll.is_finite() {
                    Ok(-ll)
                } else {
                    invalid("non-finite held-out log-likelihood")
                }
            };
            run().ok()
        })
        .collect();

    let mut curve = Vec::with_capacity(sigma_grid.len());
    for (s, &sigma) in sigma_grid.iter().enumerate() {
        let cell = &results[s * folds..(s + 1) * folds];
        let failed_folds: Vec<usize> = (0..folds).filter(|&c| cell[c].is_none()).collect();
        let score = failed_folds.is_empty().then(|| cell.iter().map(|v| v.unwrap()).sum());
        curve.push(CvPoint { sigma, score, failed_folds });
    }
    let best =
        curve.iter().filter_map(|p| p.score.map(|v| (p.sigma, v))).min_by(|a, b| a.1.total_cmp(&b.1)).ok_or(Error::AllCandidatesFailed)?;
    Ok(CvOutcome { sigma_hat: best.0, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DiscreteMeasure;
    use crate::sims::{gen_simulation1, THREE_LINE_WEIGHTS};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn folds_form_a_balanced_partition() {
        for (n, c) in [(10, 2), (11, 3), (1000, 5), (7, 7)] {
            let f = fold_assignment(n, c, 3).unwrap();
            let mut all: Vec<usize> = f.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = f.iter().map(Vec::len).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
        assert_eq!(fold_assignment(50, 5, 1).unwrap(), fold_assignment(50, 5, 1).unwrap());
        assert_ne!(fold_assignment(50, 5, 1).unwrap(), fold_assignment(50, 5, 2).unwrap());
        assert!(fold_assignment(5, 1, 0).is_err());
        assert!(fold_assignment(3, 4, 0).is_err());
    }

    #[test]
    fn grid_spans_the_residual_scale() {
        let s = gen_simulation1(400, 0.5, THREE_LINE_WEIGHTS, 1).unwrap();
        let sd = pooled_residual_sd(&s.data).unwrap();
        let g = default_sigma_grid(&s.data, 12).unwrap();
        assert_eq!(g.len(), 12);
        assert_relative_eq!(g[0], 0.05 * sd, max_relative = 1e-12);
        assert_relative_eq!(g[11], 2.0 * sd, max_relative = 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        // Exact fit: residual SD is zero.
        let exact = Dataset::new(vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]], vec![1.0, 3.0, 5.0], None).unwrap();
        assert!(pooled_residual_sd(&exact).unwrap() < 1e-12);
    }

    fn single_atom_data(n: usize, seed: u64) -> Dataset {
        let mut rng = crate::rng::seeded(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.random_range(-1.0..3.0)]).collect();
        let ys = rows.iter().map(|r| 0.5 + 1.0 * r[1] + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        Dataset::new(rows, ys, None).unwrap()
    }

    #[test]
    fn held_out_likelihood_prefers_the_true_scale() {
        let data = single_atom_data(2000, 5);
        let fitter = |_: &Dataset, _: f64| -> Result<FittedPrior> { Ok(Box::new(DiscreteMeasure::dirac(vec![0.5, 1.0])?)) };
        let out = cv_sigma(&data, 5, &[0.25, 0.5, 1.0], fitter, 8).unwrap();
        assert_eq!(out.sigma_hat, 0.5);
        assert!(out.curve.iter().all(|p| p.score.unwrap().is_finite()));
    }

    #[test]
    fn single_candidate_and_failures() {
        let data = single_atom_data(60, 2);
        let truth = || -> Result<FittedPrior> { Ok(Box::new(DiscreteMeasure::dirac(vec![0.5, 1.0])?)) };
        let out = cv_sigma(&data, 3, &[0.7], |_, _| truth(), 1).unwrap();
        assert_eq!(out.sigma_hat, 0.7);
        // Candidate 0.3 fails on every fold, so the other one wins.
        let flaky = |_: &Dataset, s: f64| if s < 0.4 { invalid("boom") } else { truth() };
        let out = cv_sigma(&data, 3, &[0.3, 0.9], flaky, 1).unwrap();
        assert_eq!(out.sigma_hat, 0.9);
        assert_eq!(out.curve[0].failed_folds, vec![0, 1, 2]);
        assert!(out.curve[0].score.is_none());
        assert!(matches!(cv_sigma(&data, 3, &[0.3], flaky, 1), Err(Error::AllCandidatesFailed)));
        let a = cv_sigma(&data, 3, &[0.4, 0.6], |_, _| truth(), 4).unwrap();
        let b = cv_sigma(&data, 3, &[0.4, 0.6], |_, _| truth(), 4).unwrap();
        assert_eq!(a.curve[0].score, b.curve[0].score);
    }
}
