//! Closed-form velocity and denoiser of an isotropic Gaussian mixture under
//! the linear path `x_t = (1 - t) x0 + t eps`.
//!
//! Given component `k`, `x_t ~ N((1 - t) mu_k, v_k I)` with
//! `v_k = (1 - t)^2 s_k^2 + t^2`, and both `x0` and `eps` are jointly Gaussian
//! with `x_t`. With `d_k = x - (1 - t) mu_k`:
//!
//! ```text
//! E[x0  | x_t = x, k] = mu_k + (1 - t) s_k^2 / v_k * d_k
//! E[eps | x_t = x, k] = t / v_k * d_k
//! ```
//!
//! The velocity `E[eps - x0 | x_t = x]` is assembled from the eps-posterior, so
//! no division by `t` occurs and `t = 0` needs no special case.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::points::{sq_dist, PointSet};
use crate::rng::stream_rng;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Isotropic Gaussian mixture `sum_k pi_k N(mu_k, s_k^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub weights: Vec<f64>,
    pub means: PointSet,
    pub stds: Vec<f64>,
}

impl MixtureModel {
    pub fn new(weights: Vec<f64>, means: PointSet, stds: Vec<f64>) -> Result<Self> {
        let m = Self {
            weights,
            means,
            stds,
        };
        m.validate()?;
        Ok(m)
    }

    /// `k` equal-weight clusters of std `std` on a circle of radius `radius`;
    /// cluster `i` sits at angle `2 pi i / k`.
    pub fn ring(k: usize, radius: f64, std: f64) -> Result<Self> {
        if k == 0 {
            return Err(config("ring needs at least one cluster"));
        }
        let mut means = PointSet::with_capacity(2, k);
        for i in 0..k {
            let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            means.push(&[radius * a.cos(), radius * a.sin()])?;
        }
        Self::new(vec![1.0 / k as f64; k], means, vec![std; k])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(config(format!(
                "mixture needs matching, non-empty weights ({}), means ({}) and stds ({})",
                k,
                self.means.len(),
                self.stds.len()
            )));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(config(format!("mixture weights must sum to 1, got {total}")));
        }
        if self.stds.iter().any(|s| !(*s > 0.0)) {
            return Err(config("mixture stds must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means.dim()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// The same mixture with component `excluded` removed and the remaining
    /// weights renormalized.
    pub fn without_component(&self, excluded: usize) -> Result<Self> {
        if excluded >= self.components() || self.components() < 2 {
            return Err(config(format!(
                "cannot exclude component {excluded} from a {}-component mixture",
                self.components()
            )));
        }
        let keep: Vec<usize> = (0..self.components()).filter(|&i| i != excluded).collect();
        let total: f64 = keep.iter().map(|&i| self.weights[i]).sum();
        let mut means = PointSet::with_capacity(self.dim(), keep.len());
        for &i in &keep {
            means.push(self.means.point(i))?;
        }
        Self::new(
            keep.iter().map(|&i| self.weights[i] / total).collect(),
            means,
            keep.iter().map(|&i| self.stds[i]).collect(),
        )
    }

    /// Draws `n` points; point `i` uses stream `offset + i`.
    pub fn sample(&self, n: usize, seed: u64, offset: u64) -> PointSet {
        let dim = self.dim();
        let mut out = PointSet::with_capacity(dim, n);
        let mut p = vec![0.0; dim];
        for i in 0..n {
            let mut rng = stream_rng(seed, offset + i as u64);
            let k = self.pick(rng.random::<f64>());
            let mu = self.means.point(k);
            for (pj, mj) in p.iter_mut().zip(mu) {
                let e: f64 = StandardNormal.sample(&mut rng);
                *pj = mj + self.stds[k] * e;
            }
            out.push(&p).expect("dim matches");
        }
        out
    }

    /// Draws `n` points from component `k` only.
    pub fn sample_component(&self, k: usize, n: usize, seed: u64, offset: u64) -> Result<PointSet> {
        if k >= self.components() {
            return Err(config(format!("component {k} out of range")));
        }
        let dim = self.dim();
        let mut out = PointSet::with_capacity(dim, n);
        let mu = self.means.point(k);
        for i in 0..n {
            let mut rng = stream_rng(seed, offset + i as u64);
            let p: Vec<f64> = mu
                .iter()
                .map(|m| m + self.stds[k] * crate::rng::normal(&mut rng))
                .collect();
            out.push(&p)?;
        }
        Ok(out)
    }

    fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.components() - 1
    }

    /// Posterior component responsibilities at `(x, t)`, via log-sum-exp.
    pub fn responsibilities(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.dim() as f64;
        let a = 1.0 - t;
        let mut logits: Vec<f64> = (0..self.components())
            .map(|k| {
                let v = a * a * self.stds[k] * self.stds[k] + t * t;
                let mu = self.means.point(k);
                let r2: f64 = x
                    .iter()
                    .zip(mu)
                    .map(|(xi, mi)| (xi - a * mi).powi(2))
                    .sum();
                self.weights[k].ln() - 0.5 * d * v.ln() - r2 / (2.0 * v)
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - mx).exp();
            total += *l;
        }
        logits.iter_mut().for_each(|l| *l /= total);
        logits
    }

    /// `(E[x0 | x_t = x], E[eps | x_t = x])`.
    fn posterior(&self, x: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        if t == 0.0 {
            // Noise-free: the state is the sample.
            return (x.to_vec(), vec![0.0; x.len()]);
        }
        let rho = self.responsibilities(x, t);
        let a = 1.0 - t;
        let mut x0 = vec![0.0; x.len()];
        let mut eps = vec![0.0; x.len()];
        for (k, r) in rho.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            let s2 = self.stds[k] * self.stds[k];
            let v = a * a * s2 + t * t;
            let mu = self.means.point(k);
            let cx = a * s2 / v;
            let ce = t / v;
            for j in 0..x.len() {
                let d = x[j] - a * mu[j];
                x0[j] += r * (mu[j] + cx * d);
                eps[j] += r * ce * d;
            }
        }
        (x0, eps)
    }

    /// Log density of the data distribution (t = 0).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let terms: Vec<f64> = (0..self.components())
            .map(|k| {
                let s2 = self.stds[k] * self.stds[k];
                self.weights[k].ln()
                    - 0.5 * d * (2.0 * std::f64::consts::PI * s2).ln()
                    - sq_dist(x, self.means.point(k)) / (2.0 * s2)
            })
            .collect();
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + terms.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(contract(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Exact marginal velocity `E[eps - x0 | x_t = x]`.
pub fn mixture_velocity(x: &[f64], t: f64, m: &MixtureModel) -> Result<Vec<f64>> {
    check_time(t)?;
    if x.len() != m.dim() {
        return Err(contract("query dimension does not match mixture"));
    }
    let (x0, eps) = m.posterior(x, t);
    Ok(eps.iter().zip(&x0).map(|(e, z)| e - z).collect())
}

/// Posterior denoiser `E[x0 | x_t = x]`.
pub fn posterior_x0(x: &[f64], t: f64, m: &MixtureModel) -> Result<Vec<f64>> {
    check_time(t)?;
    if x.len() != m.dim() {
        return Err(contract("query dimension does not match mixture"));
    }
    Ok(m.posterior(x, t).0)
}
