//! Sample-quality metrics: exact squared 2-Wasserstein distance between
//! equal-size point sets, unsafe-region mass and two-sample MMD.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::kernel::KernelConfig;
use crate::points::{sq_dist, PointSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub w2_squared: f64,
    pub unsafe_rate: f64,
    pub mmd_to_target: f64,
    pub n_points: usize,
    pub seed: u64,
}

/// Row-major squared-distance matrix between `a` and `b`.
fn cost_matrix(a: &PointSet, b: &PointSet) -> Vec<f64> {
    let n = b.len();
    let mut c = vec![0.0; a.len() * n];
    c.par_chunks_mut(n.max(1))
        .zip(a.as_flat().par_chunks(a.dim()))
        .for_each(|(row, p)| {
            for (cj, q) in row.iter_mut().zip(b.iter()) {
                *cj = sq_dist(p, q);
            }
        });
    c
}

/// Minimum-cost perfect assignment for a square `n x n` cost matrix.
///
/// Shortest augmenting paths with row and column potentials; returns the
/// column assigned to each row.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    // Index 0 is a virtual column used as the root of each search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut min_slack = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        min_slack.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - ui - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[row_of[j] - 1] = j - 1;
    }
    assign
}

fn check_pair(a: &PointSet, b: &PointSet) -> Result<()> {
    if a.len() != b.len() {
        return Err(contract(format!(
            "W2 needs equal-size sets, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.dim() != b.dim() {
        return Err(contract("point sets have different dimensions"));
    }
    if a.is_empty() {
        return Err(contract("W2 of empty sets"));
    }
    Ok(())
}

/// `(1/n) sum_i |a_i - b_{pi(i)}|^2` for the optimal permutation `pi`, with
/// the cost summed in row order.
pub fn w2_squared(a: &PointSet, b: &PointSet) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    let cost = cost_matrix(a, b);
    let assign = min_cost_assignment(&cost, n);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(total / n as f64)
}

/// The same quantity by enumerating every permutation; only for tiny sets.
pub fn w2_squared_brute_force(a: &PointSet, b: &PointSet) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    if n > 9 {
        return Err(config("brute-force W2 is limited to n <= 9"));
    }
    let cost = cost_matrix(a, b);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>();
    best = best.min(eval(&perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}

/// Fraction of samples within `radius` of `center` (boundary included).
pub fn unsafe_rate(samples: &PointSet, center: &[f64], radius: f64) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(config("unsafe radius must be positive"));
    }
    if samples.dim() != center.len() {
        return Err(contract("center dimension does not match samples"));
    }
    if samples.is_empty() {
        return Ok(0.0);
    }
    let r2 = radius * radius;
    let inside = samples.iter().filter(|p| sq_dist(p, center) <= r2).count();
    Ok(inside as f64 / samples.len() as f64)
}

fn mean_kernel(a: &PointSet, b: &PointSet, gamma: f64) -> f64 {
    let rows: Vec<f64> = a
        .as_flat()
        .par_chunks(a.dim())
        .map(|p| b.iter().map(|q| (-gamma * sq_dist(p, q)).exp()).sum::<f64>())
        .collect();
    rows.iter().sum::<f64>() / (a.len() * b.len()) as f64
}

/// Biased two-sample squared MMD with an RBF kernel of fixed precision.
pub fn mmd_to_target(samples: &PointSet, target: &PointSet, cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    if samples.is_empty() || target.is_empty() {
        return Err(contract("MMD needs non-empty sets"));
    }
    if samples.dim() != target.dim() {
        return Err(contract("point sets have different dimensions"));
    }
    let g = cfg.gamma;
    let v = mean_kernel(samples, samples, g) + mean_kernel(target, target, g)
        - 2.0 * mean_kernel(samples, target, g);
    Ok(v.max(0.0))
}
