//! Evaluation metrics and replication summaries.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::model::{sq_dist, DiscreteMeasure};
use crate::transport::solve_transport;

fn pairs(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

/// Hubert–Arabie adjusted Rand index. Returns 1 when the chance-corrected
/// denominator vanishes (e.g. both partitions are a single block).
pub fn adjusted_rand_index<A: Hash + Eq, B: Hash + Eq>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid("label vectors differ in length");
    }
    if a.len() < 2 {
        return invalid("the adjusted Rand index needs at least two items");
    }
    let mut ids_a: HashMap<&A, usize> = HashMap::new();
    let mut ids_b: HashMap<&B, usize> = HashMap::new();
    let mut cells: HashMap<(usize, usize), u64> = HashMap::new();
    for (la, lb) in a.iter().zip(b) {
        let next = ids_a.len();
        let ia = *ids_a.entry(la).or_insert(next);
        let next = ids_b.len();
        let ib = *ids_b.entry(lb).or_insert(next);
        *cells.entry((ia, ib)).or_insert(0) += 1;
    }
    let mut rows = vec![0u64; ids_a.len()];
    let mut cols = vec![0u64; ids_b.len()];
    let mut index = 0u64;
    for (&(i, j), &c) in &cells {
        rows[i] += c;
        cols[j] += c;
        index += pairs(c);
    }
    let sum_a: u64 = rows.iter().map(|&c| pairs(c)).sum();
    let sum_b: u64 = cols.iter().map(|&c| pairs(c)).sum();
    Ok(ari_from_pair_counts(index, sum_a, sum_b, pairs(a.len() as u64)))
}

/// `(index − expected) / (max − expected)` from pair counts.
pub fn ari_from_pair_counts(index: u64, sum_a: u64, sum_b: u64, total: u64) -> f64 {
    let expected = sum_a as f64 * sum_b as f64 / total as f64;
    let max = 0.5 * (sum_a as f64 + sum_b as f64);
    let denom = max - expected;
    if denom == 0.0 {
        return 1.0;
    }
    (index as f64 - expected) / denom
}

/// Exact Wasserstein-2 distance between two discrete measures under squared
/// Euclidean cost.
pub fn wasserstein2(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<f64> {
    if p.dim() != q.dim() {
        return invalid("measures live in different dimensions");
    }
    let (sp, sq): (f64, f64) = (p.weights().iter().sum(), q.weights().iter().sum());
    if (sp - sq).abs() > 1e-9 {
        return invalid(format!("total masses differ: {sp} vs {sq}"));
    }
    let cost = |i: usize, j: usize| sq_dist(&p.atoms()[i], &q.atoms()[j]);
    let plan = solve_transport(p.weights(), q.weights(), &cost)?;
    Ok(plan.cost.max(0.0).sqrt())
}

/// For each target atom, the index of its matched estimate. Nearest-atom
/// matching is used when it is conflict free; otherwise the assignment
/// minimizing total distance is used.
pub fn match_components(truth: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<Vec<usize>> {
    let k = truth.len();
    if k == 0 || estimate.len() != k {
        return invalid("matching needs equally many true and estimated atoms");
    }
    let nearest: Vec<usize> =
        truth.iter().map(|t| (0..k).min_by(|&a, &b| sq_dist(t, &estimate[a]).total_cmp(&sq_dist(t, &estimate[b]))).unwrap()).collect();
    let mut seen = vec![false; k];
    if nearest.iter().all(|&j| !std::mem::replace(&mut seen[j], true)) {
        return Ok(nearest);
    }
    let unit = vec![1.0; k];
    let cost = |i: usize, j: usize| sq_dist(&truth[i], &estimate[j]).sqrt();
    let plan = solve_transport(&unit, &unit, &cost)?;
    let mut out = vec![usize::MAX; k];
    for &(i, j, x) in &plan.flows {
        if x > 0.5 {
            out[i] = j;
        }
    }
    if out.contains(&usize::MAX) {
        return Err(crate::Error::Transport("assignment is not a permutation".into()));
    }
    Ok(out)
}

/// One replication's evaluation.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub ari: f64,
    /// Agreement of the oracle clustering under the true prior.
    pub ari_oracle: f64,
    pub w2: f64,
    pub estimate: DiscreteMeasure,
    pub wall_time_secs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two values.
    pub sd: Option<f64>,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self { mean, sd })
    }

    fn render(opt: &Option<Self>) -> String {
        match opt {
            None => "NA".into(),
            Some(Self { mean, sd: Some(sd) }) => format!("{mean:.3} ({sd:.3})"),
            Some(Self { mean, sd: None }) => format!("{mean:.3}"),
        }
    }
}

/// Bias of one true component over the runs that found the true count.
#[derive(Clone, Debug, Serialize)]
pub struct ComponentBias {
    pub truth: Vec<f64>,
    pub true_weight: f64,
    pub coef: Vec<MeanSd>,
    pub weight: MeanSd,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub runs: usize,
    pub failures: usize,
    pub ari: Option<MeanSd>,
    pub ari_oracle: Option<MeanSd>,
    pub prop_true_k: f64,
    pub w2: Option<MeanSd>,
    pub mean_wall_time_secs: Option<f64>,
    /// Empty when no run found the true count.
    pub bias: Vec<ComponentBias>,
}

/// Aggregates replications against the true prior. `failures` counts runs
/// that did not produce a record.
pub fn experiment_summary(runs: &[RunRecord], failures: usize, truth: &DiscreteMeasure) -> Result<Summary> {
    if runs.is_empty() && failures == 0 {
        return invalid("no runs to summarize");
    }
    let col = |f: fn(&RunRecord) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let k = truth.len();
    let exact: Vec<&RunRecord> = runs.iter().filter(|r| r.estimate.len() == k).collect();
    let mut bias = Vec::new();
    if !exact.is_empty() {
        let d = truth.dim();
        let mut coef = vec![vec![Vec::with_capacity(exact.len()); d]; k];
        let mut weight = vec![Vec::with_capacity(exact.len()); k];
        for r in &exact {
            let m = match_components(truth.atoms(), r.estimate.atoms())?;
            for (c, &j) in m.iter().enumerate() {
                for a in 0..d {
                    coef[c][a].push(r.estimate.atoms()[j][a] - truth.atoms()[c][a]);
                }
                weight[c].push(r.estimate.weights()[j] - truth.weights()[c]);
            }
        }
        for c in 0..k {
            bias.push(ComponentBias {
                truth: truth.atoms()[c].clone(),
                true_weight: truth.weights()[c],
                coef: coef[c].iter().map(|v| MeanSd::of(v).unwrap()).collect(),
                weight: MeanSd::of(&weight[c]).unwrap(),
            });
        }
    }
    let times = col(|r| r.wall_time_secs);
    Ok(Summary {
        runs: runs.len(),
        failures,
        ari: MeanSd::of(&col(|r| r.ari)),
        ari_oracle: MeanSd::of(&col(|r| r.ari_oracle)),
        prop_true_k: if runs.is_empty() { 0.0 } else { exact.len() as f64 / runs.len() as f64 },
        w2: MeanSd::of(&col(|r| r.w2)),
        mean_wall_time_secs: MeanSd::of(&times).map(|m| m.mean),
        bias,
    })
}

impl Summary {
    pub fn to_text(&self, label: &str) -> String {
        let mut s = String::new();
        let head = ["method", "runs", "failed", "ARI", "ARI (true prior)", "prop. true K", "W2"];
        let row = [
            label.to_string(),
            self.runs.to_string(),
            self.failures.to_string(),
            MeanSd::render(&self.ari),
            MeanSd::render(&self.ari_oracle),
            format!("{:.3}", self.prop_true_k),
            MeanSd::render(&self.w2),
        ];
        let widths: Vec<usize> = head.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        for cells in [head.map(String::from).to_vec(), row.to_vec()] {
            let line: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(s, "{}", line.join("  ").trim_end()).unwrap();
        }
        if !self.bias.is_empty() {
            writeln!(s).unwrap();
            writeln!(s, "component  truth                  coefficient bias (sd)                 weight bias (sd)").unwrap();
            for (c, b) in self.bias.iter().enumerate() {
                let truth: Vec<String> = b.truth.iter().map(|v| format!("{v:.2}")).collect();
                let coef: Vec<String> = b.coef.iter().map(|m| MeanSd::render(&Some(*m))).collect();
                writeln!(
                    s,
                    "{:<9}  ({}; {:.2})  {}  {}",
                    c + 1,
                    truth.join(", "),
                    b.true_weight,
                    coef.join(", "),
                    MeanSd::render(&Some(b.weight))
                )
                .unwrap();
            }
        }
        s
    }

    /// Header and one row of the headline table.
    pub fn csv_rows(&self, label: &str) -> Vec<Vec<String>> {
        let opt = |m: &Option<MeanSd>| match m {
            Some(m) => (format!("{}", m.mean), m.sd.map_or(String::new(), |s| s.to_string())),
            None => (String::new(), String::new()),
        };
        let (ari, ari_sd) = opt(&self.ari);
        let (oracle, oracle_sd) = opt(&self.ari_oracle);
        let (w2, w2_sd) = opt(&self.w2);
        vec![
            [
                "method",
                "runs",
                "failures",
                "ari_mean",
                "ari_sd",
                "ari_true_prior_mean",
                "ari_true_prior_sd",
                "prop_true_k",
                "w2_mean",
                "w2_sd",
            ]
            .map(String::from)
            .to_vec(),
            vec![
                label.to_string(),
                self.runs.to_string(),
                self.failures.to_string(),
                ari,
                ari_sd,
                oracle,
                oracle_sd,
                self.prop_true_k.to_string(),
                w2,
                w2_sd,
            ],
        ]
    }

    /// Header plus one row per component and coordinate.
    pub fn bias_csv_rows(&self) -> Vec<Vec<String>> {
        let mut out = vec![["component", "parameter", "truth", "bias_mean", "bias_sd"].map(String::from).to_vec()];
        let sd = |m: &MeanSd| m.sd.map_or(String::new(), |s| s.to_string());
        for (c, b) in self.bias.iter().enumerate() {
            for (a, m) in b.coef.iter().enumerate() {
                out.push(vec![(c + 1).to_string(), format!("beta{a}"), b.truth[a].to_string(), m.mean.to_string(), sd(m)]);
            }
            out.push(vec![(c + 1).to_string(), "weight".into(), b.true_weight.to_string(), b.weight.mean.to_string(), sd(&b.weight)]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pair_count_ari(a: &[u32], b: &[u32]) -> f64 {
        let n = a.len();
        let (mut index, mut sa, mut sb) = (0u64, 0u64, 0u64);
        for i in 0..n {
            for j in i + 1..n {
                let (same_a, same_b) = (a[i] == a[j], b[i] == b[j]);
                index += u64::from(same_a && same_b);
                sa += u64::from(same_a);
                sb += u64::from(same_b);
            }
        }
        ari_from_pair_counts(index, sa, sb, (n * (n - 1) / 2) as u64)
    }

    #[test]
    fn ari_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 2], &[5, 5, 9, 7]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[3, 3, 3], &[1, 1, 1]).unwrap(), 1.0);
        // (0,0,1,1) vs (0,1,0,1): no shared pairs, expected index 2·2/6.
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert_eq!(v, pair_count_ari(&[0, 0, 1, 1], &[0, 1, 0, 1]));
        assert_relative_eq!(v, -0.5, epsilon = 1e-15);
        assert!(adjusted_rand_index(&[0], &[0]).is_err());
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn ari_matches_pair_counting() {
        let mut rng = crate::rng::seeded(9);
        use rand::Rng;
        for _ in 0..100 {
            let n = rng.random_range(2..60);
            let ka = rng.random_range(1..6);
            let kb = rng.random_range(1..6);
            let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..ka)).collect();
            let b: Vec<u32> = (0..n).map(|_| rng.random_range(0..kb)).collect();
            assert_eq!(adjusted_rand_index(&a, &b).unwrap(), pair_count_ari(&a, &b));
        }
    }

    #[test]
    fn w2_reference_values() {
        let p = DiscreteMeasure::new(vec![vec![0.0, 1.0], vec![2.0, 0.0]], vec![0.4, 0.6]).unwrap();
        assert_eq!(wasserstein2(&p, &p).unwrap(), 0.0);
        let a = DiscreteMeasure::dirac(vec![1.0, 2.0]).unwrap();
        let b = DiscreteMeasure::dirac(vec![4.0, 6.0]).unwrap();
        assert_relative_eq!(wasserstein2(&a, &b).unwrap(), 5.0, epsilon = 1e-12);
        // Dirac target: the only coupling moves everything to it.
        let c = DiscreteMeasure::dirac(vec![0.0, 5.0]).unwrap();
        assert_relative_eq!(wasserstein2(&p, &c).unwrap(), (0.4f64 * 16.0 + 0.6 * 29.0).sqrt(), epsilon = 1e-12);
        assert!(wasserstein2(&p, &DiscreteMeasure::dirac(vec![0.0]).unwrap()).is_err());
    }

    #[test]
    fn w2_two_by_two_matches_coupling_scan() {
        let p = DiscreteMeasure::new(vec![vec![0.0, 0.0], vec![1.0, 2.0]], vec![0.5, 0.5]).unwrap();
        let q = DiscreteMeasure::new(vec![vec![0.5, 1.5], vec![-1.0, 0.3]], vec![0.5, 0.5]).unwrap();
        let c = |i: usize, j: usize| sq_dist(&p.atoms()[i], &q.atoms()[j]);
        let best = (0..=500_000)
            .map(|s| {
                let t = s as f64 * 1e-6;
                t * c(0, 0) + (0.5 - t) * c(0, 1) + (0.5 - t) * c(1, 0) + t * c(1, 1)
            })
            .fold(f64::INFINITY, f64::min);
        assert!((wasserstein2(&p, &q).unwrap() - best.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn matching_prefers_nearest_and_resolves_conflicts() {
        let truth = vec![vec![0.0], vec![1.0], vec![10.0]];
        assert_eq!(match_components(&truth, &[vec![9.0], vec![0.1], vec![1.2]]).unwrap(), vec![1, 2, 0]);
        // 0 and 1 both pick 0.4; total distance is 2.4 for 0 → 0.4, 1 → 3
        // against 3.6 the other way round.
        assert_eq!(match_components(&truth, &[vec![0.4], vec![3.0], vec![12.0]]).unwrap(), vec![0, 1, 2]);
    }

    fn record(atoms: Vec<Vec<f64>>, weights: Vec<f64>, ari: f64, w2: f64) -> RunRecord {
        RunRecord { ari, ari_oracle: 0.7, w2, estimate: DiscreteMeasure::new(atoms, weights).unwrap(), wall_time_secs: 1.0 }
    }

    #[test]
    fn summary_hand_computed() {
        let truth = DiscreteMeasure::new(vec![vec![0.0], vec![5.0]], vec![0.5, 0.5]).unwrap();
        let runs = vec![
            record(vec![vec![5.5], vec![0.1]], vec![0.6, 0.4], 0.5, 0.2),
            record(vec![vec![-0.1], vec![4.5]], vec![0.5, 0.5], 0.7, 0.4),
            record(vec![vec![1.0]], vec![1.0], 0.0, 3.0),
        ];
        let s = experiment_summary(&runs, 1, &truth).unwrap();
        assert_relative_eq!(s.ari.unwrap().mean, 0.4, epsilon = 1e-12);
        assert_relative_eq!(s.ari.unwrap().sd.unwrap(), 0.13f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(s.prop_true_k, 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(s.w2.unwrap().mean, 3.6 / 3.0, epsilon = 1e-12);
        assert_eq!(s.failures, 1);
        // Component at 0: biases 0.1 and −0.1; weights 0.4 and 0.5.
        assert_relative_eq!(s.bias[0].coef[0].mean, 0.0, epsilon = 1e-12);
        assert_relative_eq!(s.bias[0].coef[0].sd.unwrap(), 0.02f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(s.bias[0].weight.mean, -0.05, epsilon = 1e-12);
        assert_relative_eq!(s.bias[1].coef[0].mean, 0.0, epsilon = 1e-12);
        assert_relative_eq!(s.bias[1].weight.mean, 0.05, epsilon = 1e-12);
        assert!(s.to_text("x").contains("0.400 (0.361)"));
        assert_eq!(s.csv_rows("x")[1].len(), s.csv_rows("x")[0].len());
        assert_eq!(s.bias_csv_rows().len(), 1 + 2 * 2);
    }

    #[test]
    fn single_run_has_no_spread() {
        let truth = DiscreteMeasure::new(vec![vec![0.0], vec![5.0], vec![9.0]], vec![0.3, 0.3, 0.4]).unwrap();
        let runs = vec![record(vec![vec![0.1], vec![5.0], vec![9.2]], vec![0.3, 0.3, 0.4], 0.9, 0.1)];
        let s = experiment_summary(&runs, 0, &truth).unwrap();
        assert_eq!(s.prop_true_k, 1.0);
        assert!(s.ari.unwrap().sd.is_none());
        assert!(s.bias.iter().all(|b| b.weight.sd.is_none()));
        assert!(experiment_summary(&[], 0, &truth).is_err());
    }

    fn measure_strategy(dim: usize) -> impl Strategy<Value = DiscreteMeasure> {
        (1usize..6).prop_flat_map(move |k| {
            (prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), k), prop::collection::vec(0.05f64..1.0, k))
                .prop_map(|(a, w)| DiscreteMeasure::from_unnormalized(a, w).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn w2_is_a_metric(p in measure_strategy(2), q in measure_strategy(2), r in measure_strategy(2)) {
            let pq = wasserstein2(&p, &q).unwrap();
            let qp = wasserstein2(&q, &p).unwrap();
            prop_assert!((pq - qp).abs() < 1e-9);
            prop_assert!(pq >= 0.0);
            // Rounding in the weights leaves O(1e-16) of mass to move, which the
            // square root lifts to O(1e-8).
            prop_assert!(wasserstein2(&p, &p).unwrap().powi(2) < 1e-14);
            let pr = wasserstein2(&p, &r).unwrap();
            let rq = wasserstein2(&r, &q).unwrap();
            prop_assert!(pq <= pr + rq + 1e-9);
        }

        #[test]
        fn w2_is_rotation_invariant(p in measure_strategy(2), q in measure_strategy(2), angle in 0.0f64..6.3) {
            let (s, c) = angle.sin_cos();
            let rot = |m: &DiscreteMeasure| {
                let atoms = m.atoms().iter().map(|a| vec![c * a[0] - s * a[1], s * a[0] + c * a[1]]).collect();
                DiscreteMeasure::from_unnormalized(atoms, m.weights().to_vec()).unwrap()
            };
            let before = wasserstein2(&p, &q).unwrap();
            let after = wasserstein2(&rot(&p), &rot(&q)).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn w2_ignores_atom_order(p in measure_strategy(3)) {
            let atoms: Vec<Vec<f64>> = p.atoms().iter().rev().cloned().collect();
            let weights: Vec<f64> = p.weights().iter().rev().cloned().collect();
            let q = DiscreteMeasure::from_unnormalized(atoms, weights).unwrap();
            prop_assert!(wasserstein2(&p, &q).unwrap().powi(2) < 1e-14);
        }

        #[test]
        fn ari_is_bounded_and_symmetric(a in prop::collection::vec(0u8..4, 2..40), seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let b: Vec<u8> = a.iter().map(|_| rng.random_range(0..4)).collect();
            let ab = adjusted_rand_index(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, adjusted_rand_index(&b, &a).unwrap());
        }
    }
}
