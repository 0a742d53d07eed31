//! Guided ODE sampling from `t = 1` to `t = 0`.
//!
//! Guidance enters in one of two places:
//!
//! * `X0`: the field is evaluated at the denoised prediction `x0_hat = x - t v`,
//!   the prediction is moved to `x0_hat + lambda g`, and the velocity is rebuilt
//!   as `(x - x0_hat') / t = v - lambda g / t`.
//! * `Drift`: the field is evaluated at the current state and subtracted from
//!   the velocity, `v - lambda g`, so the update `x - dt v` moves along `g`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::guidance::{field_at, GuidanceSpec};
use crate::kernel::FieldStatus;
use crate::points::PointSet;
use crate::rng::standard_normal_points;

use super::VelocityModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    #[default]
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSpace {
    #[default]
    X0,
    Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub guidance: Option<GuidanceSpec>,
    /// With the midpoint rule, apply guidance only at the half-step drift.
    #[serde(default = "yes")]
    pub midpoint_guidance_only: bool,
    #[serde(default)]
    pub guidance_space: GuidanceSpace,
    /// Keep a snapshot of every point after every step.
    #[serde(default)]
    pub record_trajectory: bool,
}

fn default_steps() -> usize {
    50
}

fn yes() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            integrator: Integrator::default(),
            seed: 0,
            guidance: None,
            midpoint_guidance_only: true,
            guidance_space: GuidanceSpace::default(),
            record_trajectory: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config("sampler needs at least one step"));
        }
        if let Some(g) = &self.guidance {
            g.validate()?;
        }
        Ok(())
    }
}

/// Points at one grid time; step 0 is the initial noise at `t = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub points: PointSet,
}

/// Counters over all guided drift evaluations of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceStats {
    pub guided_evaluations: usize,
    /// Kernel precision used at each guided evaluation (empty for SPELL).
    pub gammas: Vec<f64>,
    pub out_of_range: usize,
    pub degenerate: usize,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub points: PointSet,
    pub trajectory: Vec<Snapshot>,
    pub stats: GuidanceStats,
}

/// Guidance inputs shared by every drift evaluation of a run.
#[derive(Clone, Copy)]
struct Guide<'a> {
    spec: &'a GuidanceSpec,
    negatives: &'a PointSet,
    space: GuidanceSpace,
}

/// The (possibly guided) velocity at every point of `xs` at time `t`.
fn drift(
    model: &VelocityModel,
    xs: &PointSet,
    t: f64,
    guide: Option<Guide<'_>>,
    stats: &mut GuidanceStats,
) -> Result<PointSet> {
    let mut v = model.velocity_batch(xs, t)?;
    let Some(g) = guide else { return Ok(v) };
    let lambda = g.spec.schedule.lambda_at(t)?;
    if lambda == 0.0 {
        return Ok(v);
    }
    let dim = xs.dim();
    let (queries, scale) = match g.space {
        GuidanceSpace::X0 => {
            if t <= 0.0 {
                return Err(contract("denoised-space guidance is undefined at t = 0"));
            }
            let mut q = xs.clone();
            for (qi, vi) in q.as_flat_mut().iter_mut().zip(v.as_flat()) {
                *qi -= t * vi;
            }
            (q, lambda / t)
        }
        GuidanceSpace::Drift => (xs.clone(), lambda),
    };
    let cfg = if g.spec.uses_kernel() {
        let c = g.spec.kernel.resolve(&queries, g.negatives)?;
        stats.gammas.push(c.gamma);
        c
    } else {
        g.spec.kernel
    };
    let fields: Vec<_> = queries
        .as_flat()
        .par_chunks(dim)
        .map(|q| field_at(g.spec, &cfg, q, g.negatives))
        .collect::<Result<_>>()?;
    stats.guided_evaluations += 1;
    for (vi, f) in v.as_flat_mut().chunks_exact_mut(dim).zip(&fields) {
        match f.status {
            FieldStatus::Ok => {}
            FieldStatus::OutOfRange => stats.out_of_range += 1,
            FieldStatus::Degenerate => stats.degenerate += 1,
        }
        for (a, b) in vi.iter_mut().zip(&f.value) {
            *a -= scale * b;
        }
    }
    Ok(v)
}

fn axpy(x: &PointSet, a: f64, v: &PointSet) -> PointSet {
    let mut out = x.clone();
    for (o, vi) in out.as_flat_mut().iter_mut().zip(v.as_flat()) {
        *o += a * vi;
    }
    out
}

fn check_step(t: f64, dt: f64) -> Result<()> {
    if !(dt > 0.0) || t - dt < -1e-12 || t > 1.0 {
        return Err(contract(format!("invalid step from t = {t} with dt = {dt}")));
    }
    Ok(())
}

fn euler_batch(
    model: &VelocityModel,
    xs: &PointSet,
    t: f64,
    dt: f64,
    guide: Option<Guide<'_>>,
    stats: &mut GuidanceStats,
) -> Result<PointSet> {
    if t == 0.0 {
        return Ok(xs.clone());
    }
    check_step(t, dt)?;
    let v = drift(model, xs, t, guide, stats)?;
    Ok(axpy(xs, -dt, &v))
}

fn midpoint_batch(
    model: &VelocityModel,
    xs: &PointSet,
    t: f64,
    dt: f64,
    guide: Option<Guide<'_>>,
    guidance_only_at_midpoint: bool,
    stats: &mut GuidanceStats,
) -> Result<PointSet> {
    if t == 0.0 {
        return Ok(xs.clone());
    }
    check_step(t, dt)?;
    let first = if guidance_only_at_midpoint { None } else { guide };
    let k1 = drift(model, xs, t, first, stats)?;
    let mid = axpy(xs, -0.5 * dt, &k1);
    let k2 = drift(model, &mid, t - 0.5 * dt, guide, stats)?;
    Ok(axpy(xs, -dt, &k2))
}

fn single(x: &[f64]) -> Result<PointSet> {
    PointSet::from_flat(x.len(), x.to_vec())
}

fn make_guide<'a>(
    spec: Option<&'a GuidanceSpec>,
    negatives: &'a PointSet,
    space: GuidanceSpace,
) -> Option<Guide<'a>> {
    spec.map(|spec| Guide {
        spec,
        negatives,
        space,
    })
}

/// One Euler step from `t` to `t - dt` for a single point.
///
/// A bandwidth set to "estimate" is estimated from this point alone.
pub fn guided_step_euler(
    x: &[f64],
    t: f64,
    dt: f64,
    model: &VelocityModel,
    spec: Option<&GuidanceSpec>,
    negatives: &PointSet,
    space: GuidanceSpace,
) -> Result<Vec<f64>> {
    let guide = make_guide(spec, negatives, space);
    let mut stats = GuidanceStats::default();
    Ok(euler_batch(model, &single(x)?, t, dt, guide, &mut stats)?.into_flat())
}

/// One midpoint step from `t` to `t - dt` for a single point, with guidance
/// applied only at the half-step drift.
pub fn guided_step_midpoint(
    x: &[f64],
    t: f64,
    dt: f64,
    model: &VelocityModel,
    spec: Option<&GuidanceSpec>,
    negatives: &PointSet,
    space: GuidanceSpace,
) -> Result<Vec<f64>> {
    let guide = make_guide(spec, negatives, space);
    let mut stats = GuidanceStats::default();
    Ok(midpoint_batch(model, &single(x)?, t, dt, guide, true, &mut stats)?.into_flat())
}

/// Grid time of step `i` on a uniform `steps`-step grid from 1 to 0.
pub fn grid_time(i: usize, steps: usize) -> f64 {
    (steps - i) as f64 / steps as f64
}

/// Integrates `n` standard-normal draws from `t = 1` to `t = 0`.
pub fn sample(
    model: &VelocityModel,
    cfg: &SamplerConfig,
    negatives: &PointSet,
    n: usize,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if n == 0 {
        return Err(contract("sample count must be at least 1"));
    }
    let init = standard_normal_points(cfg.seed, 0, n, model.dim());
    sample_from(model, cfg, negatives, init)
}

/// Integrates the given initial points from `t = 1` to `t = 0`.
pub fn sample_from(
    model: &VelocityModel,
    cfg: &SamplerConfig,
    negatives: &PointSet,
    init: PointSet,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if let Some(g) = &cfg.guidance {
        if g.schedule.base_lambda != 0.0 && negatives.is_empty() {
            return Err(config("guidance requires a non-empty negative set"));
        }
    }
    let guide = make_guide(cfg.guidance.as_ref(), negatives, cfg.guidance_space);
    let steps = cfg.steps;
    let dt = 1.0 / steps as f64;
    let mut stats = GuidanceStats::default();
    let mut trajectory = Vec::new();
    let mut xs = init;
    if cfg.record_trajectory {
        trajectory.push(Snapshot {
            step: 0,
            t: 1.0,
            points: xs.clone(),
        });
    }
    for i in 0..steps {
        let t = grid_time(i, steps);
        xs = match cfg.integrator {
            Integrator::Euler => euler_batch(model, &xs, t, dt, guide, &mut stats)?,
            Integrator::Midpoint => midpoint_batch(
                model,
                &xs,
                t,
                dt,
                guide,
                cfg.midpoint_guidance_only,
                &mut stats,
            )?,
        };
        if xs.as_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sampler state became non-finite at step {} (t = {t})",
                i + 1
            )));
        }
        if cfg.record_trajectory {
            trajectory.push(Snapshot {
                step: i + 1,
                t: grid_time(i + 1, steps),
                points: xs.clone(),
            });
        }
    }
    Ok(SampleOutput {
        points: xs,
        trajectory,
        stats,
    })
}

/// Writes snapshots as CSV with columns `step, t, point_id, x0, x1, ...`.
pub fn write_trajectory_csv(path: &Path, trajectory: &[Snapshot]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = trajectory.first().map(|s| s.points.dim()).unwrap_or(2);
    let mut header = vec!["step".to_string(), "t".into(), "point_id".into()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for snap in trajectory {
        for (id, p) in snap.points.iter().enumerate() {
            let mut row = vec![snap.step.to_string(), snap.t.to_string(), id.to_string()];
            row.extend(p.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::MixtureModel;
    use crate::guidance::{Schedule, ScheduleMode};
    use crate::kernel::KernelConfig;

    fn ring_model() -> VelocityModel {
        VelocityModel::AnalyticMixture(MixtureModel::ring(8, 4.0, 0.4).unwrap())
    }

    fn spec(lambda: f64, t0: f64, t1: f64) -> GuidanceSpec {
        GuidanceSpec::mmd(
            KernelConfig::with_gamma(0.5),
            Schedule::new(lambda, t0, t1, ScheduleMode::EqualStrength),
        )
    }

    fn negs() -> PointSet {
        PointSet::from_rows(&[[4.0, 0.0], [3.8, 0.3], [4.2, -0.2]]).unwrap()
    }

    #[test]
    fn zero_lambda_matches_unguided() {
        let m = ring_model();
        let x = [0.4, 1.3];
        let s = spec(0.0, 1.0, 0.0);
        for space in [GuidanceSpace::X0, GuidanceSpace::Drift] {
            let a = guided_step_euler(&x, 0.6, 0.02, &m, Some(&s), &negs(), space).unwrap();
            let b = guided_step_euler(&x, 0.6, 0.02, &m, None, &negs(), space).unwrap();
            assert_eq!(a, b);
            let v = m.velocity(&x, 0.6).unwrap();
            assert_eq!(a, vec![x[0] - 0.02 * v[0], x[1] - 0.02 * v[1]]);
        }
    }

    #[test]
    fn far_negative_matches_unguided() {
        let m = ring_model();
        let far = PointSet::from_rows(&[[1e4, 1e4]]).unwrap();
        let s = spec(1.0, 1.0, 0.0);
        let x = [0.4, 1.3];
        let a = guided_step_euler(&x, 0.6, 0.02, &m, Some(&s), &far, GuidanceSpace::X0).unwrap();
        let b = guided_step_euler(&x, 0.6, 0.02, &m, None, &far, GuidanceSpace::X0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn window_outside_step_matches_unguided_midpoint() {
        let m = ring_model();
        let s = spec(0.5, 0.4, 0.2);
        let x = [2.0, -1.0];
        let a = guided_step_midpoint(&x, 0.9, 0.02, &m, Some(&s), &negs(), GuidanceSpace::X0).unwrap();
        let b = guided_step_midpoint(&x, 0.9, 0.02, &m, None, &negs(), GuidanceSpace::X0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_time_is_a_no_op() {
        let m = ring_model();
        let x = [2.0, -1.0];
        assert_eq!(
            guided_step_euler(&x, 0.0, 0.02, &m, None, &negs(), GuidanceSpace::X0).unwrap(),
            x.to_vec()
        );
        assert!(guided_step_euler(&x, 0.01, 0.02, &m, None, &negs(), GuidanceSpace::X0).is_err());
    }

    #[test]
    fn guidance_pushes_away_from_negatives() {
        // For N(0, I) data the denoised prediction at t = 0.5 is the state itself,
        // so both spaces see the query on the same side of the negatives.
        let m = VelocityModel::AnalyticMixture(
            MixtureModel::new(vec![1.0], PointSet::from_rows(&[[0.0, 0.0]]).unwrap(), vec![1.0])
                .unwrap(),
        );
        let s = spec(0.05, 1.0, 0.0);
        let x = [3.0, 0.2];
        let c = [4.0, 0.0];
        for space in [GuidanceSpace::X0, GuidanceSpace::Drift] {
            let a = guided_step_euler(&x, 0.5, 0.02, &m, Some(&s), &negs(), space).unwrap();
            let b = guided_step_euler(&x, 0.5, 0.02, &m, None, &negs(), space).unwrap();
            let da = crate::points::sq_dist(&a, &c);
            let db = crate::points::sq_dist(&b, &c);
            assert!(da > db, "{space:?}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = ring_model();
        let cfg = SamplerConfig {
            steps: 10,
            seed: 3,
            guidance: Some(spec(0.01, 1.0, 0.3)),
            record_trajectory: true,
            ..SamplerConfig::default()
        };
        let a = sample(&m, &cfg, &negs(), 16).unwrap();
        let b = sample(&m, &cfg, &negs(), 16).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.trajectory.len(), 11);
        assert_eq!(a.trajectory[10].t, 0.0);
        assert_eq!(a.trajectory[10].points, a.points);
    }

    #[test]
    fn trajectory_csv_layout() {
        let m = ring_model();
        let cfg = SamplerConfig {
            steps: 2,
            record_trajectory: true,
            ..SamplerConfig::default()
        };
        let out = sample(&m, &cfg, &PointSet::new(2), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        write_trajectory_csv(&path, &out.trajectory).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,t,point_id,x0,x1");
        assert_eq!(lines.count(), 9);
    }
}
