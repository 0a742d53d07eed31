use proptest::prelude::*;
use sgf_core::barrier::*;
use sgf_core::flow::{MixtureModel, VelocityModel};
use sgf_core::guidance::{GuidanceSpec, MmdScale, Schedule, ScheduleMode};
use sgf_core::kernel::KernelConfig;
use sgf_core::rng::{standard_normal_points, streams};
use sgf_core::PointSet;

fn input(l: ScalarFn, beta: ScalarFn, s_c: f64) -> CertificateInput {
    CertificateInput {
        h0: -0.5,
        l,
        beta,
        mu: 0.8,
        delta: 0.1,
        s_c,
    }
}

/// `L(s) = l0 + l1 s` and `beta(s) = b0 + b1 sin^2(w s)`.
fn smooth(l0: f64, l1: f64, b0: f64, b1: f64, w: f64) -> (ScalarFn, ScalarFn) {
    (
        ScalarFn::closure(move |s| l0 + l1 * s),
        ScalarFn::closure(move |s| b0 + b1 * (w * s).sin().powi(2)),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mass_is_monotone_in_the_schedule(l0 in 0.0..2.0f64, l1 in 0.0..2.0f64, b0 in 0.0..1.0f64,
                                        b1 in 0.0..1.0f64, w in 0.5..10.0f64, bump in 0.01..1.0f64,
                                        s_c in 0.1..1.0f64) {
        let (l, beta) = smooth(l0, l1, b0, b1, w);
        let bigger = ScalarFn::closure(move |s| b0 + bump + b1 * (w * s).sin().powi(2));
        let a = weighted_mass(&input(l.clone(), beta, s_c)).unwrap();
        let b = weighted_mass(&input(l, bigger, s_c)).unwrap();
        prop_assert!(b > a);
    }

    #[test]
    fn mass_is_monotone_in_the_drift_bound(l0 in 0.0..2.0f64, l1 in 0.0..2.0f64, b0 in 0.01..1.0f64,
                                           b1 in 0.0..1.0f64, w in 0.5..10.0f64, bump in 0.01..1.0f64,
                                           s_c in 0.1..1.0f64) {
        let (l, beta) = smooth(l0, l1, b0, b1, w);
        let bigger = ScalarFn::closure(move |s| l0 + bump + l1 * s);
        let a = weighted_mass(&input(l, beta.clone(), s_c)).unwrap();
        let b = weighted_mass(&input(bigger, beta, s_c)).unwrap();
        prop_assert!(b >= a);
    }

    #[test]
    fn mass_is_monotone_in_the_deadline(l0 in 0.0..2.0f64, l1 in 0.0..2.0f64, b0 in 0.01..1.0f64,
                                        b1 in 0.0..1.0f64, w in 0.5..10.0f64, s1 in 0.05..0.9f64,
                                        ds in 0.01..0.1f64) {
        let (l, beta) = smooth(l0, l1, b0, b1, w);
        let a = weighted_mass(&input(l.clone(), beta.clone(), s1)).unwrap();
        let b = weighted_mass(&input(l, beta, s1 + ds)).unwrap();
        prop_assert!(b > a);
    }

    #[test]
    fn mass_agrees_with_integrating_factor(l0 in 0.0..2.0f64, l1 in -1.0..2.0f64, b0 in 0.0..1.0f64,
                                           b1 in 0.0..1.0f64, w in 0.5..10.0f64, s_c in 0.05..1.0f64) {
        let l1 = l1.max(-l0);
        let (l, beta) = smooth(l0, l1, b0, b1, w);
        let ci = input(l.clone(), beta.clone(), s_c);
        let mu = ci.mu;
        let mass = weighted_mass(&ci).unwrap();
        let mb = ScalarFn::closure(move |s| mu * (b0 + b1 * (w * s).sin().powi(2)));
        let y = integrating_factor_solve(&l, &mb, 0.0, s_c).unwrap();
        prop_assert!((mass - y / mu).abs() < 1e-9, "{} vs {}", mass, y / mu);
    }

    #[test]
    fn piecewise_schedules_agree_with_integrating_factor(knots in prop::collection::vec(0.01..0.99f64, 1..5),
                                                         vals in prop::collection::vec(0.0..2.0f64, 6),
                                                         l0 in 0.0..3.0f64, s_c in 0.05..1.0f64) {
        let mut k = knots;
        k.sort_by(f64::total_cmp);
        k.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        let mut all = vec![0.0];
        all.extend(k);
        all.push(1.0);
        let v = vals[..all.len() - 1].to_vec();
        let beta = ScalarFn::piecewise(all.clone(), v.clone()).unwrap();
        let l = ScalarFn::Constant(l0);
        let ci = input(l.clone(), beta, s_c);
        let mb = ScalarFn::piecewise(all, v.iter().map(|x| x * ci.mu).collect()).unwrap();
        let y = integrating_factor_solve(&l, &mb, 0.0, s_c).unwrap();
        prop_assert!((weighted_mass(&ci).unwrap() - y / ci.mu).abs() < 1e-9);
    }

    #[test]
    fn forward_window_reverses_time(t_start in 0.0..=1.0f64, len in 0.0..=1.0f64) {
        let t_end = (t_start - len).max(0.0);
        let s = Schedule::new(0.3, t_start, t_end, ScheduleMode::EqualStrength);
        let [a, b] = forward_window(&s);
        prop_assert!((a - (1.0 - t_start)).abs() < 1e-15 && (b - (1.0 - t_end)).abs() < 1e-15);
        if t_start > t_end {
            let beta = forward_schedule(&s).unwrap();
            let mid = 0.5 * (a + b);
            prop_assert_eq!(beta.eval(mid), s.lambda_at(1.0 - mid).unwrap());
            prop_assert!((beta.integral(0.0, 1.0).unwrap() - 0.3 * (t_start - t_end)).abs() < 1e-9);
        }
    }
}

/// Constant `L`, `mu`, `beta` with the certificate satisfied by 1e-3.
fn certified_constant_instance(h0: f64) -> CertificateInput {
    let (l, mu, s_c, delta) = (0.7f64, 0.9, 0.6, 0.5);
    let grow = (l * s_c).exp();
    let unit_mass = (grow - 1.0) / l;
    let beta = (delta + 1e-3 - grow * h0) / (mu * unit_mass);
    let ci = CertificateInput {
        h0,
        l: ScalarFn::Constant(l),
        beta: ScalarFn::Constant(beta),
        mu,
        delta,
        s_c,
    };
    let cert = sufficient_certificate(&ci).unwrap();
    assert!(cert.holds && (cert.lhs - delta - 1e-3).abs() < 1e-10);
    ci
}

#[test]
fn surrogate_from_unsafe_start_reaches_delta() {
    let ci = certified_constant_instance(-0.5);
    assert!(surrogate_terminal(&ci, 10_000) >= ci.delta - 1e-6);
}

// Fails: the surrogate decays like exp(-L s) while the certificate credits
// exp(+L s) growth, so a safe start with a small schedule is over-certified.
#[test]
fn surrogate_from_safe_start_reaches_delta() {
    let ci = certified_constant_instance(0.2);
    let y = surrogate_terminal(&ci, 10_000);
    assert!(y >= ci.delta - 1e-6, "terminal {y} < delta {}", ci.delta);
}

#[test]
fn unguided_trajectory_away_from_unsafe_set_stays_safe() {
    let m = MixtureModel::new(vec![1.0], PointSet::from_rows(&[[-4.0, 0.0]]).unwrap(), vec![0.3]).unwrap();
    let drift = VelocityModel::AnalyticMixture(m);
    let bs = BarrierSpec {
        center: vec![4.0, 0.0],
        radius: 1.2,
        delta: 0.1,
        boundary_layer: 0.5,
    };
    let guidance = GuidanceSpec::mmd(KernelConfig::with_gamma(1.0), Schedule::off());
    let negs = PointSet::from_rows(&[[4.0, 0.0]]).unwrap();
    let tr = simulate_forward_barrier(&bs, &drift, &guidance, &negs, &[-2.0, 0.5], 200).unwrap();
    assert!(tr.min_h >= 0.0 && !tr.hit_center);
    assert_eq!(tr.h.len(), 201);
    assert!(tr.empirical_mu.is_none());
}

#[test]
fn trajectory_through_the_center_is_flagged() {
    // Data concentrated at the barrier center has zero velocity there.
    let m = MixtureModel::new(vec![1.0], PointSet::from_rows(&[[0.0, 0.0]]).unwrap(), vec![1e-9]).unwrap();
    let bs = BarrierSpec {
        center: vec![0.0, 0.0],
        radius: 0.5,
        delta: 0.1,
        boundary_layer: 0.2,
    };
    let guidance = GuidanceSpec::mmd(KernelConfig::with_gamma(1.0), Schedule::off());
    let negs = PointSet::from_rows(&[[3.0, 3.0]]).unwrap();
    let drift = VelocityModel::AnalyticMixture(m);
    let tr = simulate_forward_barrier(&bs, &drift, &guidance, &negs, &[0.0, 0.0], 10).unwrap();
    assert!(tr.hit_center);
}

/// Fraction of trajectories with `h >= delta` at forward time `s`.
fn safe_fraction(traces: &[BarrierTrace], s: f64, delta: f64) -> f64 {
    let hits = traces
        .iter()
        .filter(|tr| {
            let k = tr.s.iter().position(|v| (v - s).abs() < 1e-9).unwrap();
            tr.h[k] >= delta
        })
        .count();
    hits as f64 / traces.len() as f64
}

#[test]
fn early_budget_keeps_more_trajectories_safe_than_late() {
    let ring = MixtureModel::ring(8, 4.0, 0.4).unwrap();
    let negs = ring.sample_component(0, 2048, 0, streams::NEGATIVES).unwrap();
    let drift = VelocityModel::AnalyticMixture(ring);
    let bs = BarrierSpec {
        center: vec![4.0, 0.0],
        radius: 1.2,
        delta: 0.1,
        boundary_layer: 0.3,
    };
    let x0 = standard_normal_points(0, 0, 512, 2);
    let run = |t_start: f64, t_end: f64| {
        let spec = GuidanceSpec::mmd(
            KernelConfig::default(),
            Schedule::new(0.002, t_start, t_end, ScheduleMode::EqualBudget),
        )
        .with_scale(MmdScale::KernelSum);
        simulate_forward_barrier_batch(&bs, &drift, &spec, &negs, &x0, 50).unwrap()
    };
    let early = run(1.0, 0.8);
    let late = run(0.4, 0.2);
    let at_deadline = |t: &[BarrierTrace]| t.iter().filter(|x| x.h_at_sc >= bs.delta).count() as f64 / t.len() as f64;
    let (fe, fl) = (at_deadline(&early), at_deadline(&late));
    assert!(fe > fl, "at deadline: early {fe} vs late {fl}");
    let (te, tl) = (safe_fraction(&early, 1.0, bs.delta), safe_fraction(&late, 1.0, bs.delta));
    assert!(te > tl, "terminal: early {te} vs late {tl}");
}
