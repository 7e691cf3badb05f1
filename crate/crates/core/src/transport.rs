//! Balanced transportation problems solved exactly by the network simplex
//! method on the bipartite supply/demand graph.
//!
//! The basis is a spanning tree with `K + L − 1` arcs, started from the
//! northwest-corner rule. Entering arcs are priced block by block; the leaving
//! arc is found on the tree path closing the entering arc's cycle.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub cost: f64,
    /// Basic arcs `(supply index, demand index, flow)` with positive flow.
    pub flows: Vec<(usize, usize, f64)>,
}

struct Basis {
    rows: usize,
    /// Basic arcs as (row, column, flow).
    arcs: Vec<(usize, usize, f64)>,
    /// Arc ids incident to each node; columns are offset by `rows`.
    adj: Vec<Vec<usize>>,
    /// Tree rooted at row 0: parent node, arc to the parent, depth.
    parent: Vec<usize>,
    parent_arc: Vec<usize>,
    depth: Vec<usize>,
    /// Dual potentials with `u_0 = 0`: `u_i + v_j = c_ij` on every basic arc.
    pot: Vec<f64>,
}

impl Basis {
    fn northwest(supply: &[f64], demand: &[f64], cost: &dyn Fn(usize, usize) -> f64) -> Self {
        let (k, l) = (supply.len(), demand.len());
        let mut ra = supply.to_vec();
        let mut rb = demand.to_vec();
        let mut arcs = Vec::with_capacity(k + l - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = ra[i].min(rb[j]).max(0.0);
            arcs.push((i, j, x));
            ra[i] -= x;
            rb[j] -= x;
            if i == k - 1 && j == l - 1 {
                break;
            }
            if i == k - 1 {
                j += 1;
            } else if j == l - 1 || ra[i] <= rb[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        let nodes = k + l;
        let mut basis = Self {
            rows: k,
            arcs,
            adj: vec![Vec::new(); nodes],
            parent: vec![usize::MAX; nodes],
            parent_arc: vec![usize::MAX; nodes],
            depth: vec![0; nodes],
            pot: vec![0.0; nodes],
        };
        for (id, &(i, j, _)) in basis.arcs.iter().enumerate() {
            basis.adj[i].push(id);
            basis.adj[k + j].push(id);
        }
        basis.hang(0, usize::MAX, cost);
        basis
    }

    fn other_end(&self, id: usize, node: usize) -> usize {
        let (i, j, _) = self.arcs[id];
        if node == i {
            self.rows + j
        } else {
            i
        }
    }

    /// Re-roots the subtree reachable from `top` without crossing `via`, which
    /// becomes the arc from `top` to its parent, and refreshes depths and
    /// potentials below it.
    fn hang(&mut self, top: usize, via: usize, cost: &dyn Fn(usize, usize) -> f64) {
        if via == usize::MAX {
            self.parent[top] = usize::MAX;
            self.depth[top] = 0;
            self.pot[top] = 0.0;
        } else {
            let up = self.other_end(via, top);
            let (i, j, _) = self.arcs[via];
            self.parent[top] = up;
            self.depth[top] = self.depth[up] + 1;
            self.pot[top] = cost(i, j) - self.pot[up];
        }
        self.parent_arc[top] = via;
        let mut stack = vec![top];
        while let Some(node) = stack.pop() {
            for e in 0..self.adj[node].len() {
                let id = self.adj[node][e];
                if id == self.parent_arc[node] {
                    continue;
                }
                let child = self.other_end(id, node);
                let (i, j, _) = self.arcs[id];
                self.parent[child] = node;
                self.parent_arc[child] = id;
                self.depth[child] = self.depth[node] + 1;
                self.pot[child] = cost(i, j) - self.pot[node];
                stack.push(child);
            }
        }
    }

    /// Arc ids along the tree path from `from` to `to`, and how many of them
    /// lie on the `from` side of the common ancestor.
    fn path(&self, from: usize, to: usize) -> (Vec<usize>, usize) {
        let (mut a, mut b) = (from, to);
        let mut head = Vec::new();
        let mut tail = Vec::new();
        while self.depth[a] > self.depth[b] {
            head.push(self.parent_arc[a]);
            a = self.parent[a];
        }
        while self.depth[b] > self.depth[a] {
            tail.push(self.parent_arc[b]);
            b = self.parent[b];
        }
        while a != b {
            head.push(self.parent_arc[a]);
            a = self.parent[a];
            tail.push(self.parent_arc[b]);
            b = self.parent[b];
        }
        let split = head.len();
        head.extend(tail.into_iter().rev());
        (head, split)
    }

    fn detach(&mut self, id: usize) {
        let (i, j, _) = self.arcs[id];
        let k = self.rows;
        for node in [i, k + j] {
            let list = &mut self.adj[node];
            let pos = list.iter().position(|&x| x == id).expect("arc is incident");
            list.swap_remove(pos);
        }
    }
}

/// Minimizes `Σ c_ij γ_ij` over couplings with row sums `supply` and column
/// sums `demand`.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &dyn Fn(usize, usize) -> f64) -> Result<TransportPlan> {
    let (k, l) = (supply.len(), demand.len());
    if k == 0 || l == 0 {
        return Err(Error::Transport("empty marginal".into()));
    }
    if supply.iter().chain(demand).any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Transport("marginals must be nonnegative and finite".into()));
    }
    let (sa, sb): (f64, f64) = (supply.iter().sum(), demand.iter().sum());
    if (sa - sb).abs() > 1e-9 {
        return Err(Error::Transport(format!("marginal totals differ: {sa} vs {sb}")));
    }
    let mut scale: f64 = 1.0;
    for i in 0..k {
        for j in 0..l {
            let c = cost(i, j);
            if !c.is_finite() {
                return Err(Error::Transport(format!("non-finite cost at ({i}, {j})")));
            }
            scale = scale.max(c.abs());
        }
    }
    let eps = 1e-12 * scale;
    let flow_eps = 1e-15 * sa.max(1.0);

    let mut basis = Basis::northwest(supply, demand, cost);
    let total = k * l;
    let block = ((total as f64).sqrt().ceil() as usize).clamp(1, total);
    let mut cursor = 0usize;
    let max_pivots = 100 * (k + l) * (k + l).max(50);
    let mut is_basic = vec![false; total];
    for &(i, j, _) in &basis.arcs {
        is_basic[i * l + j] = true;
    }

    for _ in 0..max_pivots {
        // Block pricing: best candidate within the first block holding any.
        let mut best: Option<(usize, f64)> = None;
        let mut scanned = 0;
        while scanned < total {
            let end = (scanned + block).min(total);
            for s in scanned..end {
                let a = (cursor + s) % total;
                if is_basic[a] {
                    continue;
                }
                let (i, j) = (a / l, a % l);
                let rc = cost(i, j) - basis.pot[i] - basis.pot[k + j];
                if rc < -eps && best.is_none_or(|(_, b)| rc < b) {
                    best = Some((a, rc));
                }
            }
            scanned = end;
            if best.is_some() {
                break;
            }
        }
        let Some((entering, _)) = best else {
            let cost_total = basis.arcs.iter().map(|&(i, j, x)| x * cost(i, j)).sum();
            let flows = basis.arcs.iter().filter(|a| a.2 > flow_eps).copied().collect();
            return Ok(TransportPlan { cost: cost_total, flows });
        };
        cursor = (cursor + scanned) % total;
        let (ei, ej) = (entering / l, entering % l);

        // Cycle: entering arc (+), then the tree path from column ej back to
        // row ei alternating (−, +, −, ...).
        let (path, split) = basis.path(k + ej, ei);
        let mut theta = f64::INFINITY;
        let mut leave_pos = usize::MAX;
        for (pos, &id) in path.iter().enumerate() {
            if pos % 2 == 0 && basis.arcs[id].2 < theta {
                theta = basis.arcs[id].2;
                leave_pos = pos;
            }
        }
        for (pos, &id) in path.iter().enumerate() {
            let f = &mut basis.arcs[id].2;
            if pos % 2 == 0 {
                *f = (*f - theta).max(0.0);
            } else {
                *f += theta;
            }
        }
        let leave = path[leave_pos];
        let (li, lj, _) = basis.arcs[leave];
        is_basic[li * l + lj] = false;
        is_basic[entering] = true;
        basis.detach(leave);
        basis.arcs[leave] = (ei, ej, theta);
        basis.adj[ei].push(leave);
        basis.adj[k + ej].push(leave);
        // The cut subtree holds the endpoint of the entering arc on the same
        // side of the common ancestor as the leaving arc.
        let top = if leave_pos < split { k + ej } else { ei };
        basis.hang(top, leave, cost);
    }
    Err(Error::Transport("pivot limit reached".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn dense(c: &[Vec<f64>]) -> impl Fn(usize, usize) -> f64 + '_ {
        move |i, j| c[i][j]
    }

    #[test]
    fn trivial_instances() {
        let plan = solve_transport(&[1.0], &[1.0], &|_, _| 3.0).unwrap();
        assert_relative_eq!(plan.cost, 3.0);
        let c = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let plan = solve_transport(&[0.5, 0.5], &[0.5, 0.5], &dense(&c)).unwrap();
        assert!(plan.cost.abs() < 1e-15);
        assert!(solve_transport(&[0.5], &[0.6], &|_, _| 0.0).is_err());
    }

    #[test]
    fn matches_linear_scan_on_two_by_two() {
        let mut rng = crate::rng::seeded(1);
        for _ in 0..20 {
            let a0: f64 = rng.random_range(0.05..0.95);
            let b0: f64 = rng.random_range(0.05..0.95);
            let (a, b) = ([a0, 1.0 - a0], [b0, 1.0 - b0]);
            let c: Vec<Vec<f64>> = (0..2).map(|_| (0..2).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
            // γ11 = t determines the coupling.
            let (lo, hi) = ((a[0] - b[1]).max(0.0), a[0].min(b[0]));
            let steps = ((hi - lo) / 1e-6).ceil() as usize;
            let brute = (0..=steps)
                .map(|s| {
                    let t = (lo + s as f64 * 1e-6).min(hi);
                    t * c[0][0] + (a[0] - t) * c[0][1] + (b[0] - t) * c[1][0] + (a[1] - b[0] + t) * c[1][1]
                })
                .fold(f64::INFINITY, f64::min);
            let plan = solve_transport(&a, &b, &dense(&c)).unwrap();
            assert!((plan.cost - brute).abs() < 1e-5, "{} vs {}", plan.cost, brute);
        }
    }

    /// Minimum cost over every basic feasible solution: each 5-arc spanning
    /// tree of K_{3,3} carries a unique flow.
    fn enumerate_bases(a: &[f64; 3], b: &[f64; 3], c: &[Vec<f64>]) -> f64 {
        let mut best = f64::INFINITY;
        for mask in 0u32..512 {
            if mask.count_ones() != 5 {
                continue;
            }
            let arcs: Vec<(usize, usize)> = (0..9).filter(|s| mask & (1 << s) != 0).map(|s| (s / 3, s % 3)).collect();
            let mut ra = a.to_vec();
            let mut rb = b.to_vec();
            let mut flow = [[0.0f64; 3]; 3];
            let mut left = arcs.clone();
            // Peel leaves: a node with one remaining arc fixes that arc's flow.
            let mut progress = true;
            while !left.is_empty() && progress {
                progress = false;
                for idx in 0..left.len() {
                    let (i, j) = left[idx];
                    let row_deg = left.iter().filter(|e| e.0 == i).count();
                    let col_deg = left.iter().filter(|e| e.1 == j).count();
                    let x = if row_deg == 1 {
                        ra[i]
                    } else if col_deg == 1 {
                        rb[j]
                    } else {
                        continue;
                    };
                    flow[i][j] = x;
                    ra[i] -= x;
                    rb[j] -= x;
                    left.remove(idx);
                    progress = true;
                    break;
                }
            }
            let balanced = ra.iter().chain(&rb).all(|r| r.abs() < 1e-12);
            let feasible = flow.iter().flatten().all(|&x| x >= -1e-12);
            if left.is_empty() && balanced && feasible {
                let cost: f64 = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| flow[i][j] * c[i][j]).sum();
                best = best.min(cost);
            }
        }
        best
    }

    #[test]
    fn matches_basis_enumeration_on_three_by_three() {
        let mut rng = crate::rng::seeded(2);
        for _ in 0..30 {
            let draw = |rng: &mut crate::rng::StreamRng| {
                let p: [u32; 3] = [rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..10)];
                let s: u32 = p.iter().sum();
                [p[0] as f64 / s as f64, p[1] as f64 / s as f64, p[2] as f64 / s as f64]
            };
            let (a, b) = (draw(&mut rng), draw(&mut rng));
            let b = [b[0], b[1], 1.0 - b[0] - b[1]];
            let a = [a[0], a[1], 1.0 - a[0] - a[1]];
            let c: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(0.0..4.0)).collect()).collect();
            let plan = solve_transport(&a, &b, &dense(&c)).unwrap();
            assert!((plan.cost - enumerate_bases(&a, &b, &c)).abs() < 1e-6);
        }
    }

    #[test]
    fn plan_respects_marginals_on_larger_instances() {
        let mut rng = crate::rng::seeded(3);
        for (k, l) in [(7, 11), (30, 25), (1, 9), (12, 1)] {
            let mut a: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let mut b: Vec<f64> = (0..l).map(|_| rng.random_range(0.1..1.0)).collect();
            let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
            a.iter_mut().for_each(|v| *v /= sa);
            b.iter_mut().for_each(|v| *v /= sb);
            let c: Vec<Vec<f64>> = (0..k).map(|_| (0..l).map(|_| rng.random_range(0.0..3.0)).collect()).collect();
            let plan = solve_transport(&a, &b, &dense(&c)).unwrap();
            let mut rows = vec![0.0; k];
            let mut cols = vec![0.0; l];
            for &(i, j, x) in &plan.flows {
                rows[i] += x;
                cols[j] += x;
            }
            for (r, t) in rows.iter().zip(&a).chain(cols.iter().zip(&b)) {
                assert!((r - t).abs() < 1e-12);
            }
        }
    }
}
