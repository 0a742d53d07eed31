//! Repulsive guidance fields and their time schedules.
//!
//! Three fields push a query away from a negative set:
//!
//! * `Mmd`: the gradient of the single-point MMD energy (see [`crate::kernel`]).
//! * `Spell`: a sparse radial force, `alpha (r - |d|)_+ d / |d|` summed over negatives.
//! * `SafeDenoiser`: `beta_hat(z) (z - m(z))`, where `m(z)` is the kernel-weighted
//!   mean of the negatives and `beta_hat` the kernel density of the negatives at `z`.
//!
//! With a shared RBF bandwidth the Safe Denoiser direction is a positive
//! multiple of the MMD gradient, `z - m(z) = sigma^2 / (2 Z(z)) grad E(z)`;
//! [`verify_prop1`] checks this numerically.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::kernel::{self, FieldStatus, FieldValue, KernelConfig, Z_FLOOR};
use crate::points::{norm, sq_dist, PointSet};
use crate::rng::{stream_rng, streams};
use crate::special::{match_bandwidth, MatchingProblem};

/// Slack on window edges so grid times such as `1 - 25 * 0.02` land inside.
const WINDOW_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    EqualStrength,
    EqualBudget,
    ShiftedWindow,
}

/// Piecewise-constant guidance strength over a diffusion-time window
/// `[t_end, t_start]` (time runs from 1 down to 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(rename = "lambda")]
    pub base_lambda: f64,
    /// `[t_start, t_end]` with `t_start >= t_end`.
    pub window: [f64; 2],
    pub mode: ScheduleMode,
    #[serde(default = "default_reference_length")]
    pub reference_window_length: f64,
}

fn default_reference_length() -> f64 {
    0.2
}

impl Schedule {
    pub fn new(base_lambda: f64, t_start: f64, t_end: f64, mode: ScheduleMode) -> Self {
        Self {
            base_lambda,
            window: [t_start, t_end],
            mode,
            reference_window_length: default_reference_length(),
        }
    }

    /// A schedule that is zero everywhere.
    pub fn off() -> Self {
        Self::new(0.0, 1.0, 0.0, ScheduleMode::EqualStrength)
    }

    pub fn t_start(&self) -> f64 {
        self.window[0]
    }

    pub fn t_end(&self) -> f64 {
        self.window[1]
    }

    pub fn window_length(&self) -> f64 {
        self.t_start() - self.t_end()
    }

    pub fn validate(&self) -> Result<()> {
        let [ts, te] = self.window;
        if !(0.0..=1.0).contains(&ts) || !(0.0..=1.0).contains(&te) {
            return Err(config(format!("window [{ts}, {te}] must lie in [0, 1]")));
        }
        if te > ts {
            return Err(config(format!(
                "window must satisfy t_end <= t_start, got [{ts}, {te}]"
            )));
        }
        if !(self.base_lambda >= 0.0 && self.base_lambda.is_finite()) {
            return Err(config(format!(
                "lambda must be non-negative, got {}",
                self.base_lambda
            )));
        }
        if self.mode == ScheduleMode::EqualBudget {
            if !(self.reference_window_length > 0.0) {
                return Err(config("equal_budget needs a positive reference window length"));
            }
            if ts == te {
                return Err(config(
                    "equal_budget with a degenerate window divides by zero",
                ));
            }
        }
        Ok(())
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_end() - WINDOW_SLACK && t <= self.t_start() + WINDOW_SLACK
    }

    /// Strength inside the window.
    pub fn window_lambda(&self) -> Result<f64> {
        match self.mode {
            ScheduleMode::EqualStrength | ScheduleMode::ShiftedWindow => Ok(self.base_lambda),
            ScheduleMode::EqualBudget => {
                let len = self.window_length();
                if len <= 0.0 {
                    return Err(config(
                        "equal_budget with a degenerate window divides by zero",
                    ));
                }
                Ok(self.base_lambda * self.reference_window_length / len)
            }
        }
    }

    pub fn lambda_at(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(contract(format!("time {t} outside [0, 1]")));
        }
        let inside = self.window_lambda()?;
        Ok(if self.contains(t) { inside } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Mmd,
    Spell,
    SafeDenoiser,
}

/// Scale of the MMD field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MmdScale {
    /// The energy gradient `grad E`, with the `1/N` average over negatives.
    #[default]
    Energy,
    /// The negated raw kernel-sum gradient, `(N/2) grad E`.
    KernelSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub field: FieldKind,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub mmd_scale: MmdScale,
    /// Shield radius (SPELL).
    #[serde(default = "one")]
    pub r: f64,
    /// Radial strength (SPELL).
    #[serde(default = "one")]
    pub alpha: f64,
    /// Density weight (Safe Denoiser).
    #[serde(default = "one")]
    pub eta: f64,
    /// Safe Denoiser guidance is switched off where `beta_hat < beta_min`.
    #[serde(default)]
    pub beta_min: f64,
    #[serde(flatten)]
    pub schedule: Schedule,
}

fn one() -> f64 {
    1.0
}

impl GuidanceSpec {
    pub fn mmd(kernel: KernelConfig, schedule: Schedule) -> Self {
        Self {
            field: FieldKind::Mmd,
            kernel,
            mmd_scale: MmdScale::Energy,
            r: 1.0,
            alpha: 1.0,
            eta: 1.0,
            beta_min: 0.0,
            schedule,
        }
    }

    pub fn spell(r: f64, alpha: f64, schedule: Schedule) -> Self {
        Self {
            field: FieldKind::Spell,
            r,
            alpha,
            ..Self::mmd(KernelConfig::default(), schedule)
        }
    }

    pub fn safe_denoiser(kernel: KernelConfig, eta: f64, schedule: Schedule) -> Self {
        Self {
            field: FieldKind::SafeDenoiser,
            eta,
            ..Self::mmd(kernel, schedule)
        }
    }

    pub fn with_scale(mut self, scale: MmdScale) -> Self {
        self.mmd_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        match self.field {
            FieldKind::Mmd | FieldKind::SafeDenoiser => self.kernel.validate_heuristic()?,
            FieldKind::Spell => {}
        }
        match self.field {
            FieldKind::Spell => {
                if !(self.r > 0.0) {
                    return Err(config("SPELL requires a positive shield radius"));
                }
                if !(self.alpha >= 0.0) {
                    return Err(config("SPELL requires a non-negative strength"));
                }
            }
            FieldKind::SafeDenoiser => {
                if !(self.eta > 0.0) {
                    return Err(config("Safe Denoiser requires eta > 0"));
                }
            }
            FieldKind::Mmd => {}
        }
        Ok(())
    }

    /// Whether the field depends on a kernel bandwidth.
    pub fn uses_kernel(&self) -> bool {
        !matches!(self.field, FieldKind::Spell)
    }
}

/// Sum of thresholded radial forces away from each negative within radius `r`.
///
/// A query exactly on a negative contributes nothing for that negative and is
/// flagged [`FieldStatus::Degenerate`].
pub fn spell_force(z: &[f64], negatives: &PointSet, r: f64, alpha: f64) -> Result<FieldValue> {
    if !(r > 0.0) {
        return Err(config("shield radius must be positive"));
    }
    if negatives.dim() != z.len() {
        return Err(contract(format!(
            "query dimension {} does not match negative set dimension {}",
            z.len(),
            negatives.dim()
        )));
    }
    let mut out = vec![0.0; z.len()];
    let mut status = FieldStatus::Ok;
    for y in negatives.iter() {
        let d = sq_dist(z, y).sqrt();
        if d >= r {
            continue;
        }
        if d == 0.0 {
            status = FieldStatus::Degenerate;
            continue;
        }
        let scale = alpha * (r - d) / d;
        for ((o, zi), yi) in out.iter_mut().zip(z).zip(y) {
            *o += scale * (zi - yi);
        }
    }
    Ok(FieldValue { value: out, status })
}

/// Kernel-weighted mean of the negatives, `sum_i w_i(z) y_i`.
///
/// When every kernel value underflows, the nearest negative is returned and
/// flagged [`FieldStatus::OutOfRange`].
pub fn unsafe_mean(z: &[f64], negatives: &PointSet, cfg: &KernelConfig) -> Result<FieldValue> {
    let (_, weights) = kernel::kernel_weights(z, negatives, cfg)?;
    match weights {
        Some(w) => {
            let mut m = vec![0.0; z.len()];
            for (wi, y) in w.iter().zip(negatives.iter()) {
                for (mj, yj) in m.iter_mut().zip(y) {
                    *mj += wi * yj;
                }
            }
            Ok(FieldValue::ok(m))
        }
        None => {
            let nearest = negatives
                .iter()
                .min_by(|a, b| sq_dist(z, a).total_cmp(&sq_dist(z, b)))
                .expect("non-empty");
            Ok(FieldValue {
                value: nearest.to_vec(),
                status: FieldStatus::OutOfRange,
            })
        }
    }
}

/// `(eta / N) sum_i k(z, y_i)`.
pub fn beta_hat(z: &[f64], negatives: &PointSet, cfg: &KernelConfig, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(config("eta must be positive"));
    }
    let z_mean = kernel::kernel_mean(z, negatives, cfg)?;
    Ok(if z_mean < Z_FLOOR { 0.0 } else { eta * z_mean })
}

/// `z - unsafe_mean(z)`.
pub fn safe_denoiser_direction(
    z: &[f64],
    negatives: &PointSet,
    cfg: &KernelConfig,
) -> Result<FieldValue> {
    let m = unsafe_mean(z, negatives, cfg)?;
    Ok(FieldValue {
        value: z.iter().zip(&m.value).map(|(a, b)| a - b).collect(),
        status: m.status,
    })
}

/// The unscheduled field of `spec` at `z`. `cfg` must carry a concrete bandwidth.
pub fn field_at(
    spec: &GuidanceSpec,
    cfg: &KernelConfig,
    z: &[f64],
    negatives: &PointSet,
) -> Result<FieldValue> {
    match spec.field {
        FieldKind::Mmd => match spec.mmd_scale {
            MmdScale::Energy => kernel::grad_mmd2(z, negatives, cfg),
            MmdScale::KernelSum => {
                let mut g = kernel::kernel_sum_grad(z, negatives, cfg)?;
                g.value.iter_mut().for_each(|v| *v = -*v);
                Ok(g)
            }
        },
        FieldKind::Spell => spell_force(z, negatives, spec.r, spec.alpha),
        FieldKind::SafeDenoiser => {
            let beta = beta_hat(z, negatives, cfg, spec.eta)?;
            if beta <= 0.0 || beta < spec.beta_min {
                return Ok(FieldValue::zero(z.len(), FieldStatus::Ok));
            }
            let mut d = safe_denoiser_direction(z, negatives, cfg)?;
            d.value.iter_mut().for_each(|v| *v *= beta);
            Ok(d)
        }
    }
}

/// `lambda(t) * field(z)`; zero outside the schedule window.
///
/// If `spec` asks for an estimated bandwidth, it is estimated from `{z}`
/// alone. Batched callers should resolve the bandwidth once per batch and
/// use [`field_at`].
pub fn evaluate_guidance(
    spec: &GuidanceSpec,
    z: &[f64],
    t: f64,
    negatives: &PointSet,
) -> Result<FieldValue> {
    let lambda = spec.schedule.lambda_at(t)?;
    if lambda == 0.0 {
        return Ok(FieldValue::zero(z.len(), FieldStatus::Ok));
    }
    let cfg = if spec.uses_kernel() {
        let q = PointSet::from_flat(z.len(), z.to_vec())?;
        spec.kernel.resolve(&q, negatives)?
    } else {
        spec.kernel
    };
    let mut f = field_at(spec, &cfg, z, negatives)?;
    f.value.iter_mut().for_each(|v| *v *= lambda);
    Ok(f)
}

/// Outcome of a numerical identity check over random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub trials: usize,
    pub dim: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_error: f64,
    /// Trial indices (the stream id within `seed`) that broke the tolerance.
    pub failures: Vec<usize>,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Tolerance of the Safe Denoiser / MMD-gradient identity.
pub const PROP1_TOL: f64 = 1e-10;

/// A random query, negative set and bandwidth for identity checks.
pub fn random_instance(seed: u64, trial: usize, dim: usize) -> (Vec<f64>, PointSet, KernelConfig) {
    let mut rng = stream_rng(seed, streams::VERIFY + trial as u64);
    let n = rng.random_range(1..=24usize);
    let spread: f64 = rng.random_range(0.5..2.0);
    let mut negs = PointSet::with_capacity(dim, n);
    for _ in 0..n {
        let p: Vec<f64> = (0..dim)
            .map(|_| spread * crate::rng::normal(&mut rng))
            .collect();
        negs.push(&p).expect("dim matches");
    }
    let z: Vec<f64> = (0..dim)
        .map(|_| 1.5 * crate::rng::normal(&mut rng))
        .collect();
    // log-uniform precision in [0.05, 2]
    let gamma = (rng.random_range((0.05f64).ln()..(2.0f64).ln())).exp();
    (z, negs, KernelConfig::with_gamma(gamma))
}

/// Checks `z - m(z) = sigma^2 / (2 Z(z)) grad E(z)` on random instances.
///
/// `kde_scale` multiplies the bandwidth used for the Safe Denoiser side;
/// any value other than 1 breaks the identity (a negative control).
pub fn verify_prop1_with(
    trials: usize,
    dim: usize,
    seed: u64,
    kde_scale: f64,
) -> Result<IdentityReport> {
    if trials == 0 {
        return Err(config("trials must be at least 1"));
    }
    let mut report = IdentityReport {
        trials,
        dim,
        seed,
        tolerance: PROP1_TOL,
        max_error: 0.0,
        failures: Vec::new(),
    };
    for trial in 0..trials {
        let (z, negs, cfg) = random_instance(seed, trial, dim);
        let kde_cfg = KernelConfig::with_sigma(cfg.sigma() * kde_scale);
        let err = prop1_error(&z, &negs, &cfg, &kde_cfg)?;
        report.max_error = report.max_error.max(err);
        if !(err < PROP1_TOL) {
            report.failures.push(trial);
        }
    }
    Ok(report)
}

pub fn verify_prop1(trials: usize, dim: usize, seed: u64) -> Result<IdentityReport> {
    verify_prop1_with(trials, dim, seed, 1.0)
}

/// `|g_SD(z) - sigma^2 / (2 Z) grad E(z)| / (1 + |z|)`.
pub fn prop1_error(
    z: &[f64],
    negatives: &PointSet,
    mmd_cfg: &KernelConfig,
    kde_cfg: &KernelConfig,
) -> Result<f64> {
    let sd = safe_denoiser_direction(z, negatives, kde_cfg)?;
    let g = kernel::grad_mmd2(z, negatives, mmd_cfg)?;
    let zm = kernel::kernel_mean(z, negatives, mmd_cfg)?;
    if sd.status != FieldStatus::Ok || g.status != FieldStatus::Ok {
        return Err(Error::Verification(
            "kernel underflow in identity check instance".into(),
        ));
    }
    let s2 = mmd_cfg.sigma().powi(2);
    let scale = s2 / (2.0 * zm);
    let diff: f64 = sd
        .value
        .iter()
        .zip(&g.value)
        .map(|(a, b)| (a - scale * b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(diff / (1.0 + norm(z)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpellMatchReport {
    pub sigma: f64,
    pub probes: usize,
    /// Largest relative magnitude gap at the matching distance.
    pub max_rel_magnitude_error: f64,
    /// Smallest cosine between the two force directions at the matching distance.
    pub min_cosine: f64,
    /// Radial force norm at `|d| = r + 1` (zero by construction).
    pub spell_norm_beyond_radius: f64,
    /// Gaussian MMD force norm at `|d| = r + 1`.
    pub mmd_norm_beyond_radius: f64,
}

impl SpellMatchReport {
    pub fn passed(&self) -> bool {
        self.max_rel_magnitude_error < 1e-9 && self.min_cosine > 1.0 - 1e-12
    }
}

/// Probes the radial force and the single-point MMD force (scaled by
/// `lambda_g`, bandwidth from [`match_bandwidth`]) at random directions.
pub fn verify_spell_as_mmd(p: &MatchingProblem, probe_count: usize, seed: u64) -> Result<SpellMatchReport> {
    let sigma = match_bandwidth(p)?;
    let cfg = KernelConfig::with_sigma(sigma);
    let mut rng = stream_rng(seed, streams::VERIFY);
    let dim = 2 + (seed % 3) as usize;
    let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let negs = PointSet::from_flat(dim, center.clone())?;

    let probe = |dir: &[f64], dist: f64| -> Result<(Vec<f64>, Vec<f64>)> {
        let x: Vec<f64> = center.iter().zip(dir).map(|(c, u)| c + dist * u).collect();
        let spell = spell_force(&x, &negs, p.r, p.alpha)?.value;
        let mmd: Vec<f64> = kernel::grad_mmd2(&x, &negs, &cfg)?
            .value
            .into_iter()
            .map(|v| p.lambda_g * v)
            .collect();
        Ok((spell, mmd))
    };

    let mut max_err: f64 = 0.0;
    let mut min_cos: f64 = 1.0;
    let mut beyond = (0.0, 0.0);
    for i in 0..probe_count.max(1) {
        let mut dir: Vec<f64> = (0..dim)
            .map(|_| crate::rng::normal(&mut rng))
            .collect();
        let n = norm(&dir);
        dir.iter_mut().for_each(|v| *v /= n);
        let (a, b) = probe(&dir, p.d0)?;
        let (na, nb) = (norm(&a), norm(&b));
        max_err = max_err.max((na - nb).abs() / na.max(nb));
        let cos = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        min_cos = min_cos.min(cos);
        if i == 0 {
            let (a, b) = probe(&dir, p.r + 1.0)?;
            beyond = (norm(&a), norm(&b));
        }
    }
    Ok(SpellMatchReport {
        sigma,
        probes: probe_count.max(1),
        max_rel_magnitude_error: max_err,
        min_cosine: min_cos,
        spell_norm_beyond_radius: beyond.0,
        mmd_norm_beyond_radius: beyond.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[[f64; 2]]) -> PointSet {
        PointSet::from_rows(rows).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::new(0.03, 1.0, 0.6, ScheduleMode::EqualStrength);
        assert_eq!(s.lambda_at(0.8).unwrap(), 0.03);
        for mode in [
            ScheduleMode::EqualStrength,
            ScheduleMode::EqualBudget,
            ScheduleMode::ShiftedWindow,
        ] {
            let s = Schedule::new(0.03, 1.0, 0.6, mode);
            assert_eq!(s.lambda_at(0.3).unwrap(), 0.0);
        }
        let s = Schedule::new(0.03, 1.0, 0.4, ScheduleMode::EqualBudget);
        assert!((s.lambda_at(0.7).unwrap() - 0.01).abs() < 1e-15);
        let s = Schedule::new(0.03, 0.5, 0.5, ScheduleMode::EqualBudget);
        assert!(matches!(s.lambda_at(0.5), Err(Error::Config(_))));
        assert!(Schedule::off().lambda_at(1.5).is_err());
    }

    #[test]
    fn spell_examples() {
        let r = 0.8;
        let negs = set(&[[0.0, 0.0]]);
        let f = spell_force(&[r, 0.0], &negs, r, 1.0).unwrap();
        assert_eq!(f.value, vec![0.0, 0.0]);
        let f = spell_force(&[r / 2.0, 0.0], &negs, r, 1.0).unwrap();
        assert!((f.value[0] - r / 2.0).abs() < 1e-15 && f.value[1] == 0.0);
        let sym = set(&[[1.0, 0.5], [-1.0, 0.5]]);
        let f = spell_force(&[0.0, 0.5], &sym, 2.0, 1.0).unwrap();
        assert!(f.value.iter().all(|v| v.abs() < 1e-15));
        let f = spell_force(&[0.0, 0.0], &negs, 1.0, 1.0).unwrap();
        assert_eq!(f.status, FieldStatus::Degenerate);
        assert_eq!(f.value, vec![0.0, 0.0]);
    }

    #[test]
    fn unsafe_mean_examples() {
        let cfg = KernelConfig::with_gamma(0.7);
        let m = unsafe_mean(&[3.0, 1.0], &set(&[[0.5, -0.5]]), &cfg).unwrap();
        assert_eq!(m.value, vec![0.5, -0.5]);
        let m = unsafe_mean(&[0.0, 5.0], &set(&[[1.0, 0.0], [-1.0, 0.0]]), &cfg).unwrap();
        assert!(m.value[0].abs() < 1e-15 && m.value[1].abs() < 1e-15);

        // independent softmax-weighted mean
        let negs = set(&[[0.0, 0.0], [1.0, 0.3], [-0.2, 1.4]]);
        let z = [0.4, 0.2];
        let logits: Vec<f64> = negs.iter().map(|y| -0.7 * sq_dist(&z, y)).collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = w.iter().sum();
        let expect: Vec<f64> = (0..2)
            .map(|j| negs.iter().zip(&w).map(|(y, wi)| wi * y[j]).sum::<f64>() / s)
            .collect();
        let m = unsafe_mean(&z, &negs, &cfg).unwrap();
        for (a, b) in m.value.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }

        let far = unsafe_mean(&[1e3, 0.0], &negs, &cfg).unwrap();
        assert_eq!(far.status, FieldStatus::OutOfRange);
        assert_eq!(far.value, vec![1.0, 0.3]);
    }

    #[test]
    fn beta_hat_examples() {
        let cfg = KernelConfig::with_gamma(1.0);
        assert_eq!(beta_hat(&[0.2, 0.2], &set(&[[0.2, 0.2]]), &cfg, 2.5).unwrap(), 2.5);
        assert_eq!(beta_hat(&[1e3, 0.0], &set(&[[0.0, 0.0]]), &cfg, 1.0).unwrap(), 0.0);
        let b = beta_hat(&[0.0, 0.0], &set(&[[1.0, 0.0], [0.0, 2f64.sqrt()]]), &cfg, 1.0).unwrap();
        let expect = ((-1.0f64).exp() + (-2.0f64).exp()) / 2.0;
        assert!((b - expect).abs() < 1e-15);
        assert!((b - 0.251_607).abs() < 1e-6);
        assert!(beta_hat(&[0.0, 0.0], &set(&[[0.0, 0.0]]), &cfg, 0.0).is_err());
    }

    #[test]
    fn sd_direction_examples() {
        let cfg = KernelConfig::with_gamma(0.4);
        let d = safe_denoiser_direction(&[0.0, 0.0], &set(&[[1.0, 1.0], [-1.0, -1.0]]), &cfg).unwrap();
        assert!(d.value.iter().all(|v| v.abs() < 1e-15));
        let d = safe_denoiser_direction(&[2.0, 0.5], &set(&[[1.0, 1.0]]), &cfg).unwrap();
        assert_eq!(d.value, vec![1.0, -0.5]);
    }

    #[test]
    fn prop1_identity_and_negative_control() {
        let r = verify_prop1(100, 2, 11).unwrap();
        assert!(r.passed(), "max error {}", r.max_error);
        let bad = verify_prop1_with(20, 2, 11, 1.5).unwrap();
        assert!(!bad.passed());
        assert!(bad.max_error > 1e-6);
    }

    #[test]
    fn prop1_single_point_at_query() {
        let cfg = KernelConfig::with_gamma(1.0);
        let z = [0.3, 0.9];
        let negs = set(&[[0.3, 0.9]]);
        assert_eq!(prop1_error(&z, &negs, &cfg, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn spell_matching_probes() {
        let p = MatchingProblem {
            alpha: 1.0,
            lambda_g: 1.0,
            r: 1.0,
            d0: 0.5,
        };
        let rep = verify_spell_as_mmd(&p, 16, 3).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.spell_norm_beyond_radius, 0.0);
        assert!(rep.mmd_norm_beyond_radius > 0.0);
        let bad = MatchingProblem { r: 4.0, d0: 2.0, ..p };
        assert!(verify_spell_as_mmd(&bad, 4, 3).is_err());
    }

    #[test]
    fn guidance_composition() {
        let negs = set(&[[0.0, 0.0], [0.5, 0.2]]);
        let cfg = KernelConfig::with_gamma(0.6);
        let spec = GuidanceSpec::mmd(cfg, Schedule::new(0.5, 1.0, 0.5, ScheduleMode::EqualStrength));
        let z = [0.4, -0.3];
        let out = evaluate_guidance(&spec, &z, 0.2, &negs).unwrap();
        assert_eq!(out.value, vec![0.0, 0.0]);
        let out = evaluate_guidance(&spec, &z, 0.7, &negs).unwrap();
        let g = kernel::grad_mmd2(&z, &negs, &cfg).unwrap();
        for (a, b) in out.value.iter().zip(&g.value) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }

        let ks = evaluate_guidance(&spec.with_scale(MmdScale::KernelSum), &z, 0.7, &negs).unwrap();
        for (a, b) in ks.value.iter().zip(&out.value) {
            assert!((a - b).abs() < 1e-14);
        }

        let sd = GuidanceSpec::safe_denoiser(cfg, 1.3, spec.schedule);
        let out_sd = evaluate_guidance(&sd, &z, 0.7, &negs).unwrap();
        let beta = beta_hat(&z, &negs, &cfg, 1.3).unwrap();
        let zm = kernel::kernel_mean(&z, &negs, &cfg).unwrap();
        let factor = beta * cfg.sigma().powi(2) / (2.0 * zm);
        for (a, b) in out_sd.value.iter().zip(&out.value) {
            assert!((a - factor * b).abs() < 1e-12 * (1.0 + b.abs()));
        }

        let gated = GuidanceSpec { beta_min: 10.0, ..sd };
        let out = evaluate_guidance(&gated, &z, 0.7, &negs).unwrap();
        assert_eq!(out.value, vec![0.0, 0.0]);
    }
}
