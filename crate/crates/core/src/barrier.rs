//! Reach-avoid certificates for time-windowed guidance, in forward time
//! `s = 1 - t`.
//!
//! For a barrier `h` with safe set `{h >= 0}`, a drift bound `L(s)` and an
//! alignment constant `mu`, guidance with schedule `beta(s)` is certified to
//! reach the margin `delta` by the deadline `s_c` when
//!
//! ```text
//! exp(int_0^{s_c} L) h0 + mu * I_L(s_c) >= delta,
//! I_L(s_c) = int_0^{s_c} exp(int_u^{s_c} L) beta(u) du.
//! ```
//!
//! The exponential weight favours guidance placed early in forward time,
//! i.e. early in sampling.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::flow::VelocityModel;
use crate::guidance::{field_at, GuidanceSpec, Schedule};
use crate::points::{norm, PointSet};
use crate::rng::{stream_rng, streams};

/// Absolute tolerance of the adaptive quadrature.
pub const QUAD_TOL: f64 = 1e-9;
const MAX_DEPTH: usize = 50;
/// Panels are always split this many times before the error test applies.
const MIN_DEPTH: usize = 4;

/// A real function of forward time.
#[derive(Clone)]
pub enum ScalarFn {
    Constant(f64),
    /// `values[i]` on `[knots[i], knots[i + 1])`, zero outside `[knots[0], knots[last])`.
    Piecewise { knots: Vec<f64>, values: Vec<f64> },
    Closure(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarFn::Constant(c) => write!(f, "Constant({c})"),
            ScalarFn::Piecewise { knots, values } => f
                .debug_struct("Piecewise")
                .field("knots", knots)
                .field("values", values)
                .finish(),
            ScalarFn::Closure(_) => write!(f, "Closure(..)"),
        }
    }
}

impl ScalarFn {
    pub fn closure(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        ScalarFn::Closure(Arc::new(f))
    }

    pub fn piecewise(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.len() != values.len() + 1 || values.is_empty() {
            return Err(config("piecewise function needs one more knot than values"));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(config("piecewise knots must be strictly increasing"));
        }
        if values.iter().chain(&knots).any(|v| !v.is_finite()) {
            return Err(config("piecewise function must be finite"));
        }
        Ok(ScalarFn::Piecewise { knots, values })
    }

    /// `value` on `[a, b)` and zero elsewhere.
    pub fn boxcar(a: f64, b: f64, value: f64) -> Result<Self> {
        Self::piecewise(vec![a, b], vec![value])
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            ScalarFn::Constant(c) => *c,
            ScalarFn::Piecewise { knots, values } => {
                if s < knots[0] || s >= knots[knots.len() - 1] {
                    return 0.0;
                }
                let i = knots.partition_point(|k| *k <= s) - 1;
                values[i]
            }
            ScalarFn::Closure(f) => f(s),
        }
    }

    /// Discontinuities strictly inside `(a, b)`.
    fn breaks_in(&self, a: f64, b: f64) -> Vec<f64> {
        match self {
            ScalarFn::Piecewise { knots, .. } => {
                knots.iter().copied().filter(|k| *k > a && *k < b).collect()
            }
            _ => Vec::new(),
        }
    }

    /// `int_a^b f`, exact for constant and piecewise functions.
    pub fn integral(&self, a: f64, b: f64) -> Result<f64> {
        if b < a {
            return Ok(-self.integral(b, a)?);
        }
        match self {
            ScalarFn::Constant(c) => Ok(c * (b - a)),
            ScalarFn::Piecewise { knots, values } => {
                let mut total = 0.0;
                for (i, v) in values.iter().enumerate() {
                    let lo = knots[i].max(a);
                    let hi = knots[i + 1].min(b);
                    if hi > lo {
                        total += v * (hi - lo);
                    }
                }
                Ok(total)
            }
            ScalarFn::Closure(f) => adaptive_simpson(|s| f(s), a, b, QUAD_TOL * 1e-3),
        }
    }

    /// Smallest value over the breakpoints and a uniform grid of `[a, b]`.
    fn sampled_min(&self, a: f64, b: f64) -> f64 {
        let mut pts: Vec<f64> = (0..=256).map(|i| a + (b - a) * i as f64 / 256.0).collect();
        pts.extend(self.breaks_in(a, b));
        pts.iter().map(|&s| self.eval(s)).fold(f64::INFINITY, f64::min)
    }
}

fn simpson_rec(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth >= MAX_DEPTH || (depth >= MIN_DEPTH && diff.abs() <= 15.0 * tol) {
        return left + right + diff / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth + 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if b == a {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    // Seed the recursion on four panels so that an integrand vanishing at the
    // five initial nodes is not mistaken for zero.
    let mut total = 0.0;
    let q = [a, 0.5 * (a + m), m, 0.5 * (m + b), b];
    let fq = [fa, f(q[1]), fm, f(q[3]), fb];
    for i in 0..4 {
        let (lo, hi) = (q[i], q[i + 1]);
        let mid = 0.5 * (lo + hi);
        let fmid = f(mid);
        let whole = (hi - lo) / 6.0 * (fq[i] + 4.0 * fmid + fq[i + 1]);
        total += simpson_rec(&f, lo, hi, fq[i], fmid, fq[i + 1], whole, tol / 4.0, 0);
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("quadrature on [{a}, {b}] produced {total}")));
    }
    Ok(total)
}

/// Quadrature split at the given discontinuities, tolerance shared by length.
fn integrate_split(f: impl Fn(f64) -> f64, a: f64, b: f64, mut breaks: Vec<f64>, tol: f64) -> Result<f64> {
    breaks.retain(|k| *k > a && *k < b);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut edges = vec![a];
    edges.extend(breaks);
    edges.push(b);
    let mut total = 0.0;
    for w in edges.windows(2) {
        let share = tol * (w[1] - w[0]) / (b - a);
        // Evaluate strictly inside each piece so one-sided limits are used at the edges.
        let (lo, hi) = (w[0], w[1]);
        let pad = (hi - lo) * 1e-12;
        total += adaptive_simpson(&f, lo + pad, hi - pad, share)?;
    }
    Ok(total)
}

fn check_nonnegative(name: &str, f: &ScalarFn, a: f64, b: f64) -> Result<()> {
    let m = f.sampled_min(a, b);
    if !(m >= 0.0) {
        return Err(config(format!("{name} must be non-negative on [{a}, {b}], found {m}")));
    }
    Ok(())
}

fn check_deadline(s_c: f64) -> Result<()> {
    if !(s_c > 0.0 && s_c <= 1.0) {
        return Err(config(format!("deadline must lie in (0, 1], got {s_c}")));
    }
    Ok(())
}

/// Exponentially weighted integral `int_0^{s_c} exp(int_u^{s_c} a) b(u) du`.
fn weighted_integral(a: &ScalarFn, b: &ScalarFn, s_c: f64) -> Result<f64> {
    let total_a = a.integral(0.0, s_c)?;
    let mut breaks = a.breaks_in(0.0, s_c);
    breaks.extend(b.breaks_in(0.0, s_c));
    let err = std::cell::RefCell::new(None);
    let v = integrate_split(
        |u| match a.integral(0.0, u) {
            Ok(au) => (total_a - au).exp() * b.eval(u),
            Err(e) => {
                err.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        },
        0.0,
        s_c,
        breaks,
        QUAD_TOL,
    );
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    v
}

/// Inputs of the reach-avoid certificate.
#[derive(Debug, Clone)]
pub struct CertificateInput {
    pub h0: f64,
    /// Drift bound `L(s) >= 0`.
    pub l: ScalarFn,
    /// Guidance schedule `beta(s) >= 0` in forward time.
    pub beta: ScalarFn,
    /// Alignment constant.
    pub mu: f64,
    pub delta: f64,
    /// Deadline in `(0, 1]`.
    pub s_c: f64,
}

impl CertificateInput {
    pub fn validate(&self) -> Result<()> {
        check_deadline(self.s_c)?;
        if !(self.mu > 0.0) || !(self.delta > 0.0) || !self.h0.is_finite() {
            return Err(config("certificate needs mu > 0, delta > 0 and a finite h0"));
        }
        check_nonnegative("drift bound", &self.l, 0.0, self.s_c)?;
        check_nonnegative("guidance schedule", &self.beta, 0.0, self.s_c)?;
        Ok(())
    }

    /// Non-fatal remarks about the inputs.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.mu > 1.0 {
            w.push(format!("alignment constant mu = {} exceeds 1", self.mu));
        }
        w
    }
}

/// `I_L(s_c) = int_0^{s_c} exp(int_u^{s_c} L) beta(u) du`.
pub fn weighted_mass(ci: &CertificateInput) -> Result<f64> {
    ci.validate()?;
    weighted_integral(&ci.l, &ci.beta, ci.s_c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub holds: bool,
    pub lhs: f64,
    pub int_l: f64,
    pub i_bar: f64,
}

/// `exp(int_0^{s_c} L) h0 + mu I_L(s_c) >= delta`.
pub fn sufficient_certificate(ci: &CertificateInput) -> Result<Certificate> {
    let i_bar = weighted_mass(ci)?;
    let int_l = ci.l.integral(0.0, ci.s_c)?;
    let lhs = int_l.exp() * ci.h0 + ci.mu * i_bar;
    if !lhs.is_finite() {
        return Err(Error::NonFinite(format!("certificate left-hand side {lhs}")));
    }
    Ok(Certificate {
        holds: lhs >= ci.delta,
        lhs,
        int_l,
        i_bar,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NecessaryBound {
    pub upper: f64,
    pub reachable: bool,
}

/// Upper bound on the reachable barrier value when `h' <= L+ h + mu beta`;
/// `reachable` is false when even this bound stays below `delta`.
pub fn necessary_bound(ci: &CertificateInput, l_plus: &ScalarFn) -> Result<NecessaryBound> {
    let with_plus = CertificateInput {
        l: l_plus.clone(),
        ..ci.clone()
    };
    let c = sufficient_certificate(&with_plus)?;
    Ok(NecessaryBound {
        upper: c.lhs,
        reachable: c.lhs >= ci.delta,
    })
}

/// Solution at `s_c` of `y' = a(s) y + b(s)`, `y(0) = y0`, via the integrating factor.
pub fn integrating_factor_solve(a: &ScalarFn, b: &ScalarFn, y0: f64, s_c: f64) -> Result<f64> {
    check_deadline(s_c)?;
    if !y0.is_finite() {
        return Err(Error::NonFinite("initial value".into()));
    }
    check_nonnegative("coefficient", a, 0.0, s_c)?;
    let v = a.integral(0.0, s_c)?.exp() * y0 + weighted_integral(a, b, s_c)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("integrating-factor solution {v}")));
    }
    Ok(v)
}

/// Classic fourth-order Runge-Kutta for `y' = f(s, y)` on `[0, s_c]` with
/// about `steps` steps, aligned so that no step straddles a breakpoint.
pub fn rk4(f: impl Fn(f64, f64) -> f64, y0: f64, s_c: f64, steps: usize, mut breaks: Vec<f64>) -> f64 {
    breaks.retain(|k| *k > 0.0 && *k < s_c);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut edges = vec![0.0];
    edges.extend(breaks);
    edges.push(s_c);
    let mut y = y0;
    for w in edges.windows(2) {
        let len = w[1] - w[0];
        let n = ((steps as f64 * len / s_c).ceil() as usize).max(1);
        let h = len / n as f64;
        // Keep the stages strictly inside the piece so one-sided values are used.
        let pad = len * 1e-12;
        for i in 0..n {
            let s = w[0] + i as f64 * h;
            let (s0, s1) = ((s).max(w[0] + pad), (s + h).min(w[1] - pad));
            let sm = s + 0.5 * h;
            let k1 = f(s0, y);
            let k2 = f(sm, y + 0.5 * h * k1);
            let k3 = f(sm, y + 0.5 * h * k2);
            let k4 = f(s1, y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
    }
    y
}

/// [`rk4`] on the linear equation `y' = a y + b`.
pub fn rk4_linear(a: &ScalarFn, b: &ScalarFn, y0: f64, s_c: f64, steps: usize) -> f64 {
    let mut breaks = a.breaks_in(0.0, s_c);
    breaks.extend(b.breaks_in(0.0, s_c));
    rk4(|s, y| a.eval(s) * y + b.eval(s), y0, s_c, steps, breaks)
}

/// Terminal value of the scalar surrogate `y' = -L |y| sign(y) + mu beta`.
pub fn surrogate_terminal(ci: &CertificateInput, steps: usize) -> f64 {
    let mut breaks = ci.l.breaks_in(0.0, ci.s_c);
    breaks.extend(ci.beta.breaks_in(0.0, ci.s_c));
    rk4(
        |s, y| -ci.l.eval(s) * y.abs() * y.signum() + ci.mu * ci.beta.eval(s),
        ci.h0,
        ci.s_c,
        steps,
        breaks,
    )
}

/// One comparison instance that broke the expected ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonViolation {
    pub trial: usize,
    pub upper_side: bool,
    pub y0: f64,
    pub s_c: f64,
    pub simulated: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub trials: usize,
    /// Smallest `simulated - bound` on the lower side and `bound - simulated`
    /// on the upper side; non-negative up to the tolerance when the comparison holds.
    pub min_margin: f64,
    pub violations: Vec<ComparisonViolation>,
}

/// Tolerance of the comparison sweep.
pub const COMPARISON_TOL: f64 = 1e-8;
const ODE_STEPS: usize = 10_000;

/// Random non-negative smooth slack `c0 + c1 sin^2(w s + p)`.
fn random_slack(rng: &mut impl Rng) -> ScalarFn {
    let c0 = rng.random_range(0.0..0.2);
    let c1 = rng.random_range(0.0..0.5);
    let w = rng.random_range(0.0..10.0);
    let p = rng.random_range(0.0..std::f64::consts::PI);
    ScalarFn::closure(move |s| c0 + c1 * (w * s + p).sin().powi(2))
}

/// Checks that solutions of `y' = a y + b + slack` stay above, and solutions
/// of `y' = a y + b - slack` below, the integrating-factor solution.
pub fn comparison_check(a_minus: &ScalarFn, b: &ScalarFn, trials: usize, seed: u64) -> Result<ComparisonReport> {
    check_nonnegative("coefficient", a_minus, 0.0, 1.0)?;
    let mut min_margin = f64::INFINITY;
    let mut violations = Vec::new();
    for trial in 0..trials {
        let mut rng = stream_rng(seed, streams::VERIFY + trial as u64);
        let y0 = rng.random_range(-1.0..1.0);
        let s_c = rng.random_range(0.2..=1.0);
        let slack = random_slack(&mut rng);
        let bound = integrating_factor_solve(a_minus, b, y0, s_c)?;
        let mut breaks = a_minus.breaks_in(0.0, s_c);
        breaks.extend(b.breaks_in(0.0, s_c));
        for upper_side in [false, true] {
            let sign = if upper_side { -1.0 } else { 1.0 };
            let y = rk4(
                |s, y| a_minus.eval(s) * y + b.eval(s) + sign * slack.eval(s),
                y0,
                s_c,
                ODE_STEPS,
                breaks.clone(),
            );
            let margin = sign * (y - bound);
            min_margin = min_margin.min(margin);
            if margin < -COMPARISON_TOL {
                violations.push(ComparisonViolation {
                    trial,
                    upper_side,
                    y0,
                    s_c,
                    simulated: y,
                    bound,
                });
            }
        }
    }
    Ok(ComparisonReport {
        trials,
        min_margin,
        violations,
    })
}

/// Forward window `[1 - t_start, 1 - t_end]` of a sampling-time window.
pub fn forward_window(schedule: &Schedule) -> [f64; 2] {
    [1.0 - schedule.t_start(), 1.0 - schedule.t_end()]
}

/// The schedule as a forward-time step function `beta(s) = lambda(1 - s)`.
pub fn forward_schedule(schedule: &Schedule) -> Result<ScalarFn> {
    let [a, b] = forward_window(schedule);
    let lambda = schedule.window_lambda()?;
    if b <= a || lambda == 0.0 {
        return Ok(ScalarFn::Constant(0.0));
    }
    // The window end is inclusive in sampling time; close it at s = 1 too.
    let hi = if b >= 1.0 { 1.0 + 1e-12 } else { b };
    ScalarFn::boxcar(a, hi, lambda)
}

/// Barrier `h(x) = |x - center| - radius`, positive outside the ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    pub delta: f64,
    /// Half-width of the band `|h| <= boundary_layer` where the bounds are measured.
    pub boundary_layer: f64,
}

impl BarrierSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.delta > 0.0 && self.boundary_layer > 0.0) {
            return Err(config("barrier radius, margin and boundary layer must be positive"));
        }
        Ok(())
    }

    pub fn h(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.center.len() {
            return Err(contract("state dimension does not match barrier center"));
        }
        let d: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        Ok(norm(&d) - self.radius)
    }

    /// Unit normal `(x - c) / |x - c|`; undefined at the center.
    pub fn grad_h(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let n = norm(&d);
        if n == 0.0 {
            return Err(contract("barrier gradient is undefined at the center"));
        }
        Ok(d.into_iter().map(|v| v / n).collect())
    }
}

/// Barrier values along one forward trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierTrace {
    pub s: Vec<f64>,
    pub h: Vec<f64>,
    pub s_c: f64,
    pub min_h: f64,
    pub h_at_sc: f64,
    /// Minimum of `h` over `[s_c, 1]`, where guidance is off.
    pub min_h_after_sc: f64,
    /// Smallest `grad h . field` seen inside the boundary layer while guidance was on.
    pub empirical_mu: Option<f64>,
    /// Per-step largest `|grad h . drift| / |h|` inside the boundary layer.
    pub empirical_l: Vec<Option<f64>>,
    pub empirical_l_max: Option<f64>,
    /// The trajectory reached the barrier center and was stopped there.
    pub hit_center: bool,
}

/// Integrates `dx/ds = -v(x, 1 - s) + beta(s) g(x)` forward from noise with
/// explicit Euler steps for every row of `x0`, recording the barrier.
///
/// The guidance field is evaluated at the state; an estimated bandwidth is
/// resolved from the whole batch at every step.
pub fn simulate_forward_barrier_batch(
    bs: &BarrierSpec,
    drift: &VelocityModel,
    guidance: &GuidanceSpec,
    negatives: &PointSet,
    x0: &PointSet,
    steps: usize,
) -> Result<Vec<BarrierTrace>> {
    bs.validate()?;
    guidance.validate()?;
    if steps == 0 {
        return Err(config("simulation needs at least one step"));
    }
    let n = x0.len();
    let dim = x0.dim();
    let ds = 1.0 / steps as f64;
    let s_c = forward_window(&guidance.schedule)[1];
    let mut xs = x0.clone();
    let mut alive = vec![true; n];
    let mut traces: Vec<BarrierTrace> = (0..n)
        .map(|i| {
            let h0 = bs.h(xs.point(i)).unwrap_or(f64::NAN);
            BarrierTrace {
                s: vec![0.0],
                h: vec![h0],
                s_c,
                min_h: h0,
                h_at_sc: f64::NAN,
                min_h_after_sc: f64::INFINITY,
                empirical_mu: None,
                empirical_l: Vec::with_capacity(steps),
                empirical_l_max: None,
                hit_center: false,
            }
        })
        .collect();
    for step in 0..steps {
        let s = step as f64 * ds;
        let t = (steps - step) as f64 / steps as f64;
        let v = drift.velocity_batch(&xs, t)?;
        let lambda = guidance.schedule.lambda_at(t)?;
        let field = if lambda > 0.0 {
            let cfg = if guidance.uses_kernel() {
                guidance.kernel.resolve(&xs, negatives)?
            } else {
                guidance.kernel
            };
            let f: Vec<Vec<f64>> = xs
                .as_flat()
                .par_chunks(dim)
                .map(|q| field_at(guidance, &cfg, q, negatives).map(|f| f.value))
                .collect::<Result<_>>()?;
            Some(f)
        } else {
            None
        };
        for i in 0..n {
            let tr = &mut traces[i];
            if !alive[i] {
                tr.empirical_l.push(None);
                continue;
            }
            let x = xs.point(i).to_vec();
            let h = bs.h(&x)?;
            let mut l_here = None;
            if h.abs() <= bs.boundary_layer {
                let gh = bs.grad_h(&x)?;
                // Forward drift is the negated sampling velocity.
                let fdot: f64 = -gh.iter().zip(v.point(i)).map(|(a, b)| a * b).sum::<f64>();
                if h != 0.0 {
                    l_here = Some(fdot.abs() / h.abs());
                }
                if let Some(f) = &field {
                    let align: f64 = gh.iter().zip(&f[i]).map(|(a, b)| a * b).sum();
                    tr.empirical_mu = Some(tr.empirical_mu.map_or(align, |m: f64| m.min(align)));
                }
            }
            tr.empirical_l.push(l_here);
            let p = xs.point_mut(i);
            for j in 0..dim {
                let g = field.as_ref().map_or(0.0, |f| lambda * f[i][j]);
                p[j] += ds * (-v.point(i)[j] + g);
            }
            let s_next = s + ds;
            let h_next = bs.h(p)?;
            if p.iter().zip(&bs.center).all(|(a, b)| a == b) {
                alive[i] = false;
                tr.hit_center = true;
            }
            tr.s.push(s_next);
            tr.h.push(h_next);
            tr.min_h = tr.min_h.min(h_next);
        }
    }
    for tr in &mut traces {
        // Values at the grid time closest to the deadline.
        let k = ((tr.s_c / ds).round() as usize).min(tr.h.len() - 1);
        tr.h_at_sc = tr.h[k];
        tr.min_h_after_sc = tr.h[k..].iter().copied().fold(f64::INFINITY, f64::min);
        tr.empirical_l_max = tr.empirical_l.iter().flatten().copied().reduce(f64::max);
    }
    Ok(traces)
}

/// Single-trajectory form of [`simulate_forward_barrier_batch`].
pub fn simulate_forward_barrier(
    bs: &BarrierSpec,
    drift: &VelocityModel,
    guidance: &GuidanceSpec,
    negatives: &PointSet,
    x0: &[f64],
    steps: usize,
) -> Result<BarrierTrace> {
    let start = PointSet::from_flat(x0.len(), x0.to_vec())?;
    let mut v = simulate_forward_barrier_batch(bs, drift, guidance, negatives, &start, steps)?;
    Ok(v.remove(0))
}

/// Certificate evaluation combined with empirical measurements, as emitted
/// by the command-line tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub lhs: f64,
    pub delta: f64,
    pub holds: bool,
    #[serde(rename = "I_bar")]
    pub i_bar: f64,
    #[serde(rename = "int_L")]
    pub int_l: f64,
    pub empirical_mu: Option<f64>,
    #[serde(rename = "empirical_L_max")]
    pub empirical_l_max: Option<f64>,
    pub min_h: f64,
    pub h_at_sc: f64,
}

impl CertificateReport {
    pub fn new(ci: &CertificateInput, cert: &Certificate, trace: Option<&BarrierTrace>) -> Self {
        Self {
            lhs: cert.lhs,
            delta: ci.delta,
            holds: cert.holds,
            i_bar: cert.i_bar,
            int_l: cert.int_l,
            empirical_mu: trace.and_then(|t| t.empirical_mu),
            empirical_l_max: trace.and_then(|t| t.empirical_l_max),
            min_h: trace.map_or(f64::NAN, |t| t.min_h),
            h_at_sc: trace.map_or(f64::NAN, |t| t.h_at_sc),
        }
    }
}

/// Random non-negative step function on `[0, 1]` with `pieces` pieces.
fn random_steps(rng: &mut impl Rng, pieces: usize, lo: f64, hi: f64) -> ScalarFn {
    let mut cuts: Vec<f64> = (0..pieces - 1).map(|_| rng.random_range(0.02..0.98)).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut knots = vec![0.0];
    knots.extend(cuts);
    knots.push(1.0 + 1e-9);
    let values = (0..knots.len() - 1).map(|_| rng.random_range(lo..hi)).collect();
    ScalarFn::piecewise(knots, values).expect("valid by construction")
}

/// Closed-form check of the integrating-factor solution against [`rk4_linear`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratingFactorReport {
    pub pairs: usize,
    pub max_abs_error: f64,
}

/// Random smooth pairs `a(s) = c0 + c1 s + c2 sin^2(w s)`, `b(s) = d0 + d1 cos(v s)`.
pub fn integrating_factor_suite(pairs: usize, seed: u64) -> Result<IntegratingFactorReport> {
    let mut worst: f64 = 0.0;
    for p in 0..pairs {
        let mut rng = stream_rng(seed, streams::VERIFY + (1 << 20) + p as u64);
        let (c0, c1, c2, w) = (
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..8.0),
        );
        let (d0, d1, v) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.0..8.0),
        );
        let a = ScalarFn::closure(move |s| c0 + c1 * s + c2 * (w * s).sin().powi(2));
        let b = ScalarFn::closure(move |s| d0 + d1 * (v * s).cos());
        let y0 = rng.random_range(-1.0..1.0);
        let s_c = rng.random_range(0.1..=1.0);
        let exact = integrating_factor_solve(&a, &b, y0, s_c)?;
        let ode = rk4_linear(&a, &b, y0, s_c, ODE_STEPS);
        worst = worst.max((exact - ode).abs());
    }
    Ok(IntegratingFactorReport {
        pairs,
        max_abs_error: worst,
    })
}

/// Outcome of moving guidance mass earlier on random two-impulse schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlierReport {
    pub trials: usize,
    /// Smallest `I(earlier) - I(later)` observed; positive when the property holds.
    pub min_gain: f64,
    pub failures: Vec<usize>,
}

/// Width of the boxes that stand in for impulses.
const IMPULSE_WIDTH: f64 = 0.01;

/// Two impulses of masses `(m1, m2)` at `u1 < u2`, shifted by `q` of mass
/// from the later to the earlier one, under a random `L >= l_min`.
pub fn earlier_is_better_suite(trials: usize, l_min: f64, seed: u64) -> Result<EarlierReport> {
    let mut min_gain = f64::INFINITY;
    let mut failures = Vec::new();
    for trial in 0..trials {
        let mut rng = stream_rng(seed, streams::VERIFY + (2 << 20) + trial as u64);
        let l = if rng.random::<bool>() {
            ScalarFn::Constant(rng.random_range(l_min..3.0))
        } else {
            random_steps(&mut rng, 4, l_min, 3.0)
        };
        let s_c = rng.random_range(0.3..=1.0);
        let span = s_c - IMPULSE_WIDTH;
        let mut u1 = rng.random_range(0.0..span);
        let mut u2 = rng.random_range(0.0..span);
        if u1 > u2 {
            std::mem::swap(&mut u1, &mut u2);
        }
        // Keep a gap between the boxes.
        if u2 - u1 < 2.0 * IMPULSE_WIDTH {
            u2 = (u1 + 2.0 * IMPULSE_WIDTH).min(span);
            u1 = u2 - 2.0 * IMPULSE_WIDTH;
        }
        let m1 = rng.random_range(0.0..1.0);
        let m2 = rng.random_range(0.05..1.0);
        let q = rng.random_range(0.01..=1.0) * m2;
        let two = |a: f64, b: f64| -> Result<ScalarFn> {
            let h = 1.0 / IMPULSE_WIDTH;
            ScalarFn::piecewise(
                vec![u1, u1 + IMPULSE_WIDTH, u2, u2 + IMPULSE_WIDTH],
                vec![a * h, 0.0, b * h],
            )
        };
        let mass = |beta: ScalarFn| -> Result<f64> {
            weighted_mass(&CertificateInput {
                h0: 0.0,
                l: l.clone(),
                beta,
                mu: 1.0,
                delta: 1.0,
                s_c,
            })
        };
        let before = mass(two(m1, m2)?)?;
        let after = mass(two(m1 + q, m2 - q)?)?;
        let gain = after - before;
        min_gain = min_gain.min(gain);
        if !(gain > 0.0) {
            failures.push(trial);
        }
    }
    Ok(EarlierReport {
        trials,
        min_gain,
        failures,
    })
}

/// One certified instance whose surrogate missed the margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessViolation {
    pub trial: usize,
    pub h0: f64,
    pub mu: f64,
    pub delta: f64,
    pub s_c: f64,
    pub lhs: f64,
    pub surrogate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub trials: usize,
    /// Instances on which the certificate held with the required margin.
    pub certified: usize,
    pub violations: Vec<SoundnessViolation>,
    /// Smallest `surrogate - delta` over certified instances.
    pub min_slack: f64,
}

/// Margin by which the certificate must hold before the surrogate is checked.
pub const SOUNDNESS_MARGIN: f64 = 1e-6;

/// Draws random instances; wherever the certificate holds with margin
/// [`SOUNDNESS_MARGIN`], integrates the scalar surrogate and checks that it
/// ends at or above `delta - SOUNDNESS_MARGIN`.
pub fn soundness_suite(trials: usize, seed: u64) -> Result<SoundnessReport> {
    let mut certified = 0;
    let mut violations = Vec::new();
    let mut min_slack = f64::INFINITY;
    for trial in 0..trials {
        let mut rng = stream_rng(seed, streams::VERIFY + (3 << 20) + trial as u64);
        let l = if rng.random::<bool>() {
            ScalarFn::Constant(rng.random_range(0.0..3.0))
        } else {
            random_steps(&mut rng, 3, 0.0, 3.0)
        };
        let beta = random_steps(&mut rng, 3, 0.0, 2.0);
        let ci = CertificateInput {
            h0: rng.random_range(-1.0..1.0),
            l,
            beta,
            mu: rng.random_range(0.2..=1.0),
            delta: rng.random_range(0.01..0.5),
            s_c: rng.random_range(0.2..=1.0),
        };
        let cert = sufficient_certificate(&ci)?;
        if cert.lhs < ci.delta + SOUNDNESS_MARGIN {
            continue;
        }
        certified += 1;
        let y = surrogate_terminal(&ci, ODE_STEPS);
        min_slack = min_slack.min(y - ci.delta);
        if y < ci.delta - SOUNDNESS_MARGIN {
            violations.push(SoundnessViolation {
                trial,
                h0: ci.h0,
                mu: ci.mu,
                delta: ci.delta,
                s_c: ci.s_c,
                lhs: cert.lhs,
                surrogate: y,
            });
        }
    }
    Ok(SoundnessReport {
        trials,
        certified,
        violations,
        min_slack,
    })
}
