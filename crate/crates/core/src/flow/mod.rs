//! Flow-matching dynamics on the linear Gaussian path `x_t = (1 - t) x0 + t eps`.
//!
//! Noise sits at `t = 1` and data at `t = 0`; the velocity target is
//! `eps - x0` and sampling integrates from `t = 1` down to `0` with
//! `x <- x - dt * v`.

pub mod mixture;
pub mod mlp;
pub mod sampler;
pub mod train;

use rayon::prelude::*;

use crate::error::{contract, Result};
use crate::points::PointSet;

pub use mixture::{mixture_velocity, posterior_x0, MixtureModel};
pub use mlp::Mlp;
pub use sampler::{
    guided_step_euler, guided_step_midpoint, sample, GuidanceSpace, Integrator, SampleOutput,
    SamplerConfig, Snapshot,
};
pub use train::{train_velocity, Optimizer, TrainConfig, TrainReport};

/// Signal and noise coefficients of a Gaussian path, `x_t = alpha(t) x0 + sigma(t) eps`.
#[derive(Debug, Clone, Copy)]
pub enum PathSchedule {
    /// `alpha = 1 - t`, `sigma = t`.
    Linear,
    Custom {
        alpha: fn(f64) -> f64,
        sigma: fn(f64) -> f64,
    },
}

impl Default for PathSchedule {
    fn default() -> Self {
        PathSchedule::Linear
    }
}

impl PathSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            PathSchedule::Linear => 1.0 - t,
            PathSchedule::Custom { alpha, .. } => alpha(t),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self {
            PathSchedule::Linear => t,
            PathSchedule::Custom { sigma, .. } => sigma(t),
        }
    }
}

/// Denoised prediction `x_t - t v`.
pub fn x0_from_velocity(x_t: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
    x_t.iter().zip(v).map(|(x, vi)| x - t * vi).collect()
}

/// Deterministic diffusion-style update from `t` to `s < t`:
/// `alpha_s x0_hat + (sigma_s / sigma_t) (x_t - alpha_t x0_hat)`.
pub fn ddim_step(
    x_t: &[f64],
    t: f64,
    s: f64,
    x0_hat: &[f64],
    path: &PathSchedule,
) -> Result<Vec<f64>> {
    if !(0.0 <= s && s <= t && t <= 1.0) {
        return Err(contract(format!("ddim step needs 0 <= s <= t <= 1, got s = {s}, t = {t}")));
    }
    if x_t.len() != x0_hat.len() {
        return Err(contract("state and prediction dimensions differ"));
    }
    if s == t {
        return Ok(x_t.to_vec());
    }
    let sigma_t = path.sigma(t);
    if sigma_t == 0.0 {
        return Err(contract("cannot step from a time with zero noise level"));
    }
    let (a_t, a_s) = (path.alpha(t), path.alpha(s));
    let ratio = path.sigma(s) / sigma_t;
    Ok(x_t
        .iter()
        .zip(x0_hat)
        .map(|(x, p)| a_s * p + ratio * (x - a_t * p))
        .collect())
}

/// A velocity field `v(x, t)`.
#[derive(Debug, Clone)]
pub enum VelocityModel {
    AnalyticMixture(MixtureModel),
    TrainedMlp(Mlp),
}

impl VelocityModel {
    pub fn dim(&self) -> usize {
        match self {
            VelocityModel::AnalyticMixture(m) => m.dim(),
            VelocityModel::TrainedMlp(n) => n.output_dim(),
        }
    }

    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        match self {
            VelocityModel::AnalyticMixture(m) => mixture_velocity(x, t, m),
            VelocityModel::TrainedMlp(n) => {
                let xs = PointSet::from_flat(x.len(), x.to_vec())?;
                Ok(n.velocity_batch(&xs, t)?.into_flat())
            }
        }
    }

    /// Velocity at every point of `xs` at the common time `t`.
    pub fn velocity_batch(&self, xs: &PointSet, t: f64) -> Result<PointSet> {
        if xs.dim() != self.dim() {
            return Err(contract(format!(
                "points of dimension {} given to a model of dimension {}",
                xs.dim(),
                self.dim()
            )));
        }
        match self {
            VelocityModel::AnalyticMixture(m) => {
                if !(0.0..=1.0).contains(&t) {
                    return Err(contract(format!("time {t} outside [0, 1]")));
                }
                let dim = xs.dim();
                let mut out = vec![0.0; xs.as_flat().len()];
                out.par_chunks_mut(dim)
                    .zip(xs.as_flat().par_chunks(dim))
                    .for_each(|(o, x)| {
                        o.copy_from_slice(&mixture_velocity(x, t, m).expect("checked"));
                    });
                PointSet::from_flat(dim, out)
            }
            VelocityModel::TrainedMlp(n) => n.velocity_batch(xs, t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x0_from_velocity_examples() {
        assert_eq!(x0_from_velocity(&[1.0, 2.0], 0.0, &[5.0, 6.0]), vec![1.0, 2.0]);
        assert_eq!(x0_from_velocity(&[1.0, 2.0], 1.0, &[1.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn ddim_examples() {
        let p = PathSchedule::Linear;
        let x = [0.7, -0.3];
        let x0 = [1.0, 1.0];
        assert_eq!(ddim_step(&x, 0.5, 0.5, &x0, &p).unwrap(), x.to_vec());
        assert_eq!(ddim_step(&x, 0.5, 0.0, &x0, &p).unwrap(), x0.to_vec());
        let y = ddim_step(&x, 0.5, 0.25, &x0, &p).unwrap();
        for j in 0..2 {
            let want = 0.75 * x0[j] + 0.5 * (x[j] - 0.5 * x0[j]);
            assert!((y[j] - want).abs() < 1e-15);
        }
        assert!(ddim_step(&x, 0.0, 0.0, &x0, &p).is_ok());
        let zero_noise = PathSchedule::Custom {
            alpha: |_| 1.0,
            sigma: |_| 0.0,
        };
        assert!(ddim_step(&x, 0.5, 0.2, &x0, &zero_noise).is_err());
        assert!(ddim_step(&x, 0.2, 0.5, &x0, &p).is_err());
    }

    #[test]
    fn linear_path_endpoints() {
        let p = PathSchedule::default();
        assert_eq!((p.alpha(0.0), p.sigma(0.0)), (1.0, 0.0));
        assert_eq!((p.alpha(1.0), p.sigma(1.0)), (0.0, 1.0));
    }
}
