//! Principal-branch Lambert W and radius-bandwidth matching between the
//! thresholded radial force and the single-point Gaussian MMD force.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const INV_E: f64 = 1.0 / E;
const MAX_ITER: usize = 50;

/// Principal branch `W0(z)` for real `z >= -1/e`, by Halley iteration.
pub fn lambert_w0(z: f64) -> Result<f64> {
    if z.is_nan() {
        return Err(Error::Domain("lambert_w0 of NaN".into()));
    }
    // Allow the branch point to be hit within rounding of -1/e.
    if z < -INV_E - 4.0 * f64::EPSILON {
        return Err(Error::Domain(format!(
            "lambert_w0 requires z >= -1/e, got {z}"
        )));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    if z.is_infinite() {
        return Ok(f64::INFINITY);
    }

    let p2 = 2.0 * (E * z + 1.0);
    if p2 <= 0.0 {
        return Ok(-1.0);
    }
    let p = p2.sqrt();
    let mut w = if p < 0.3 {
        // Branch-point series in p = sqrt(2(ez + 1)).
        let series = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p;
        if p < 1e-6 {
            return Ok(series);
        }
        series
    } else if z < 3.0 {
        // Pade-style guess, accurate to a few percent on [-0.3, 3].
        let l = (1.0 + z).ln();
        l * (1.0 - (1.0 + l).ln() / (2.0 + l))
    } else {
        let l1 = z.ln();
        let l2 = l1.ln();
        l1 - l2 + l2 / l1
    };

    for _ in 0..MAX_ITER {
        let ew = w.exp();
        let f = w * ew - z;
        let wp1 = w + 1.0;
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let step = f / denom;
        w -= step;
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("lambert_w0 iteration diverged at z = {z}")));
        }
        if step.abs() <= 4.0 * f64::EPSILON * (1.0 + w.abs()) {
            break;
        }
    }
    Ok(w.max(-1.0))
}

/// Parameters for matching the Gaussian MMD force to the thresholded radial
/// force at a chosen distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingProblem {
    /// Radial force strength.
    pub alpha: f64,
    /// MMD guidance scale.
    pub lambda_g: f64,
    /// Shield radius.
    pub r: f64,
    /// Matching distance, strictly inside the shield.
    pub d0: f64,
}

impl MatchingProblem {
    /// `alpha (r - d0) d0 / (4 lambda)`; a solution exists iff this is at most `1/e`.
    pub fn lambert_argument(&self) -> f64 {
        self.alpha * (self.r - self.d0) * self.d0 / (4.0 * self.lambda_g)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda_g", self.lambda_g),
            ("r", self.r),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.d0 > 0.0 && self.d0 < self.r) {
            return Err(Error::Domain(format!(
                "matching distance must satisfy 0 < d0 < r, got d0 = {}, r = {}",
                self.d0, self.r
            )));
        }
        let arg = self.lambert_argument();
        if arg > INV_E {
            return Err(Error::Domain(format!(
                "infeasible matching: alpha (r - d0) d0 / (4 lambda) = {arg} > 1/e"
            )));
        }
        Ok(())
    }

    /// Magnitude of the radial force at distance `d`.
    pub fn radial_magnitude(&self, d: f64) -> f64 {
        self.alpha * (self.r - d).max(0.0)
    }

    /// Magnitude of the single-point Gaussian MMD force at distance `d`.
    pub fn gaussian_magnitude(&self, d: f64, sigma: f64) -> f64 {
        let s2 = sigma * sigma;
        self.lambda_g * 2.0 * d / s2 * (-d * d / (2.0 * s2)).exp()
    }
}

/// Bandwidth `sigma` with `sigma^2 = d0^2 / (-2 W0(-alpha (r - d0) d0 / (4 lambda)))`.
pub fn match_bandwidth(p: &MatchingProblem) -> Result<f64> {
    p.validate()?;
    let w = lambert_w0(-p.lambert_argument())?;
    let s = -w;
    if s <= 0.0 {
        return Err(Error::Domain(
            "matching exponent vanished; d0 too close to the shield boundary".into(),
        ));
    }
    Ok(p.d0 / (2.0 * s).sqrt())
}
