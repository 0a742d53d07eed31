//! RBF kernel, the single-point MMD energy against a negative set, its
//! gradient, and the top-k bandwidth heuristic.
//!
//! The kernel is parameterized by its precision `gamma`:
//! `k(x, y) = exp(-gamma * |x - y|^2)`, with bandwidth `sigma = 1 / sqrt(2 gamma)`.
//!
//! The energy of a query `x` against negatives `{y_i}` is the biased squared
//! MMD between the Dirac at `x` and the empirical negative distribution:
//!
//! ```text
//! E(x) = k(x, x) + 1/N^2 sum_ij k(y_i, y_j) - 2/N sum_i k(x, y_i)
//! ```
//!
//! Its gradient `(2 / sigma^2) Z(x) [x - sum_i w_i(x) y_i]` points away from the
//! kernel-weighted mean of the negatives and is the repulsive guidance field.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::points::{check_dim, sq_dist, PointSet};

/// Below this value of `Z(x) = mean_i k(x, y_i)` the field is treated as zero.
pub const Z_FLOOR: f64 = 1e-300;

/// Default number of queries per tile in batched evaluation.
pub const DEFAULT_TILE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Kernel precision. Non-positive values mean "estimate from data" at the
    /// call sites that support it (see [`KernelConfig::resolve`]).
    pub gamma: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_top_k() -> usize {
    3
}

fn default_eps() -> f64 {
    0.05
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            gamma: -1.0,
            top_k: default_top_k(),
            eps: default_eps(),
        }
    }
}

impl KernelConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }

    pub fn with_sigma(sigma: f64) -> Self {
        Self::with_gamma(1.0 / (2.0 * sigma * sigma))
    }

    pub fn sigma(&self) -> f64 {
        (1.0 / (2.0 * self.gamma)).sqrt()
    }

    pub fn is_estimated(&self) -> bool {
        self.gamma <= 0.0
    }

    /// Checks the heuristic settings; `gamma` may still be a placeholder.
    pub fn validate_heuristic(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(config("top_k must be at least 1"));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(config(format!("eps must lie in (0, 1), got {}", self.eps)));
        }
        Ok(())
    }

    /// Checks that the config is usable for kernel evaluation.
    pub fn validate(&self) -> Result<()> {
        self.validate_heuristic()?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(config(format!(
                "kernel precision must be positive and finite, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Returns a config with a concrete `gamma`: the configured one if positive,
    /// otherwise the top-k heuristic estimate from `queries` against `negatives`.
    pub fn resolve(&self, queries: &PointSet, negatives: &PointSet) -> Result<KernelConfig> {
        if self.is_estimated() {
            let gamma = estimate_bandwidth(queries, negatives, self)?;
            Ok(KernelConfig { gamma, ..*self })
        } else {
            self.validate()?;
            Ok(*self)
        }
    }
}

/// Whether a field evaluation was regular or fell back to a limiting value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldStatus {
    Ok,
    /// All kernel values underflowed; the field was set to its far-field limit.
    OutOfRange,
    /// The query coincided with a negative where a direction is undefined.
    Degenerate,
}

/// A vector-valued field evaluation with its status flag.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldValue {
    pub value: Vec<f64>,
    pub status: FieldStatus,
}

impl FieldValue {
    pub(crate) fn ok(value: Vec<f64>) -> Self {
        Self {
            value,
            status: FieldStatus::Ok,
        }
    }

    pub(crate) fn zero(dim: usize, status: FieldStatus) -> Self {
        Self {
            value: vec![0.0; dim],
            status,
        }
    }
}

pub fn rbf(x: &[f64], y: &[f64], cfg: &KernelConfig) -> Result<f64> {
    check_dim(x, y)?;
    Ok((-cfg.gamma * sq_dist(x, y)).exp())
}

fn check_negatives(x: &[f64], negatives: &PointSet) -> Result<()> {
    if negatives.is_empty() {
        return Err(config("negative set must be non-empty"));
    }
    if negatives.dim() != x.len() {
        return Err(Error::Contract(format!(
            "query dimension {} does not match negative set dimension {}",
            x.len(),
            negatives.dim()
        )));
    }
    Ok(())
}

/// Mean of the negative-set self kernel, `1/N^2 sum_ij k(y_i, y_j)`.
pub fn negative_self_term(negatives: &PointSet, cfg: &KernelConfig) -> f64 {
    let n = negatives.len();
    let mut acc = 0.0;
    for i in 0..n {
        let yi = negatives.point(i);
        acc += 1.0;
        for j in (i + 1)..n {
            acc += 2.0 * (-cfg.gamma * sq_dist(yi, negatives.point(j))).exp();
        }
    }
    acc / (n * n) as f64
}

/// Biased squared MMD between `{x}` and the negative set.
pub fn mmd2(x: &[f64], negatives: &PointSet, cfg: &KernelConfig) -> Result<f64> {
    check_negatives(x, negatives)?;
    let cross: f64 = negatives
        .iter()
        .map(|y| (-cfg.gamma * sq_dist(x, y)).exp())
        .sum::<f64>()
        / negatives.len() as f64;
    let e = 1.0 + negative_self_term(negatives, cfg) - 2.0 * cross;
    // Exact cancellation can leave a tiny negative residue.
    Ok(e.max(0.0))
}

/// `Z(x) = 1/N sum_i k(x, y_i)`.
pub fn kernel_mean(x: &[f64], negatives: &PointSet, cfg: &KernelConfig) -> Result<f64> {
    check_negatives(x, negatives)?;
    Ok(negatives
        .iter()
        .map(|y| (-cfg.gamma * sq_dist(x, y)).exp())
        .sum::<f64>()
        / negatives.len() as f64)
}

/// Normalized kernel weights `w_i = k(x, y_i) / (N Z(x))` and `Z(x)`.
///
/// Returns `None` for the weights when `Z(x)` is below [`Z_FLOOR`].
pub fn kernel_weights(
    x: &[f64],
    negatives: &PointSet,
    cfg: &KernelConfig,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_negatives(x, negatives)?;
    let k: Vec<f64> = negatives
        .iter()
        .map(|y| (-cfg.gamma * sq_dist(x, y)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    let z = sum / negatives.len() as f64;
    if z < Z_FLOOR {
        return Ok((z, None));
    }
    Ok((z, Some(k.into_iter().map(|v| v / sum).collect())))
}

/// `Z(x)` and the unnormalized sum `sum_i k(x, y_i) (x - y_i)`.
fn weighted_displacement(x: &[f64], negatives: &PointSet, gamma: f64) -> (f64, Vec<f64>) {
    let mut acc = vec![0.0; x.len()];
    let mut ksum = 0.0;
    for y in negatives.iter() {
        let k = (-gamma * sq_dist(x, y)).exp();
        ksum += k;
        for ((a, xi), yi) in acc.iter_mut().zip(x).zip(y) {
            *a += k * (xi - yi);
        }
    }
    (ksum / negatives.len() as f64, acc)
}

/// Gradient of [`mmd2`] with respect to the query.
///
/// Equals `(2 / sigma^2) Z(x) [x - sum_i w_i(x) y_i]`. When `Z(x)` underflows
/// the zero vector is returned with [`FieldStatus::OutOfRange`].
pub fn grad_mmd2(x: &[f64], negatives: &PointSet, cfg: &KernelConfig) -> Result<FieldValue> {
    check_negatives(x, negatives)?;
    let (z, acc) = weighted_displacement(x, negatives, cfg.gamma);
    if z < Z_FLOOR {
        return Ok(FieldValue::zero(x.len(), FieldStatus::OutOfRange));
    }
    // 2 / sigma^2 = 4 gamma; the 1/N from Z is folded into the scale.
    let scale = 4.0 * cfg.gamma / negatives.len() as f64;
    Ok(FieldValue::ok(acc.into_iter().map(|a| scale * a).collect()))
}

/// Gradient of the raw kernel sum, `sum_j -2 gamma k(x, y_j) (x - y_j)`.
///
/// This is the attractive direction; `grad_mmd2 = -(2/N) kernel_sum_grad`.
pub fn kernel_sum_grad(x: &[f64], negatives: &PointSet, cfg: &KernelConfig) -> Result<FieldValue> {
    check_negatives(x, negatives)?;
    let (z, acc) = weighted_displacement(x, negatives, cfg.gamma);
    if z < Z_FLOOR {
        return Ok(FieldValue::zero(x.len(), FieldStatus::OutOfRange));
    }
    let scale = -2.0 * cfg.gamma;
    Ok(FieldValue::ok(acc.into_iter().map(|a| scale * a).collect()))
}

/// [`grad_mmd2`] for every query, evaluated in tiles of `tile` queries.
pub fn grad_mmd2_batch(
    queries: &PointSet,
    negatives: &PointSet,
    cfg: &KernelConfig,
    tile: usize,
) -> Result<(PointSet, Vec<FieldStatus>)> {
    let dim = queries.dim();
    if negatives.is_empty() {
        return Err(config("negative set must be non-empty"));
    }
    if negatives.dim() != dim {
        return Err(Error::Contract(format!(
            "query dimension {} does not match negative set dimension {}",
            dim,
            negatives.dim()
        )));
    }
    let tile = tile.max(1);
    let mut out = vec![0.0; queries.as_flat().len()];
    let mut status = vec![FieldStatus::Ok; queries.len()];
    out.par_chunks_mut(tile * dim)
        .zip(status.par_chunks_mut(tile))
        .zip(queries.as_flat().par_chunks(tile * dim))
        .try_for_each(|((o, s), q)| -> Result<()> {
            for ((oi, si), qi) in o
                .chunks_exact_mut(dim)
                .zip(s.iter_mut())
                .zip(q.chunks_exact(dim))
            {
                let g = grad_mmd2(qi, negatives, cfg)?;
                oi.copy_from_slice(&g.value);
                *si = g.status;
            }
            Ok(())
        })?;
    Ok((PointSet::from_flat(dim, out)?, status))
}

/// Top-k neighbor heuristic: `gamma = -log(eps) / mean r^2`, where `r^2`
/// averages the squared distances at sorted ranks `1..=k_eff` for each query.
/// Rank 0 is always skipped, and `k_eff = min(max(top_k, 1), M - 1)`.
pub fn estimate_bandwidth(
    queries: &PointSet,
    negatives: &PointSet,
    cfg: &KernelConfig,
) -> Result<f64> {
    cfg.validate_heuristic()?;
    if queries.is_empty() {
        return Err(config("bandwidth heuristic needs at least one query"));
    }
    let m = negatives.len();
    if m < 2 {
        return Err(config(format!(
            "bandwidth heuristic needs at least 2 negatives, got {m}"
        )));
    }
    if queries.dim() != negatives.dim() {
        return Err(Error::Contract(format!(
            "query dimension {} does not match negative set dimension {}",
            queries.dim(),
            negatives.dim()
        )));
    }
    let k_eff = cfg.top_k.max(1).min(m - 1);
    // Collect then sum sequentially so the result does not depend on the
    // thread count.
    let per_query: Vec<f64> = queries
        .as_flat()
        .par_chunks(queries.dim())
        .map(|q| {
            let mut d2: Vec<f64> = negatives.iter().map(|y| sq_dist(q, y)).collect();
            // Only ranks 0..=k_eff matter.
            if k_eff + 1 < d2.len() {
                d2.select_nth_unstable_by(k_eff, f64::total_cmp);
                d2.truncate(k_eff + 1);
            }
            d2.sort_unstable_by(f64::total_cmp);
            d2[1..=k_eff].iter().sum::<f64>()
        })
        .collect();
    let total: f64 = per_query.iter().sum();
    let mean_r2 = (total / (queries.len() * k_eff) as f64).max(1e-12);
    Ok(-cfg.eps.ln() / mean_r2)
}
