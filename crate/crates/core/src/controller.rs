//! Pruning control: the tapering budget `F_sched` and the multiplier `lambda_F`.
//!
//! The loss seen by the pruning parameters is `L = L0 - lambda_F * F`.
//! `lambda_F` is a proportional controller on `F - F_sched`, normalized by
//! `K`, the expected change of `F` per unit `lambda_F` under one step of
//! the rho solver. `F_sched` tapers exponentially towards `F_0`, but its
//! step is capped by `mu / |lambda_F|` when the multiplier is negative, so
//! the schedule slows down when the data loss pushes back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::sigmoid_prime;
use crate::real::Real;
use crate::resource::ResourcePolynomial;
use crate::rho::{rho_step, PruningSiteState, RhoSolverConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Exponential decay capped by `mu / |lambda_F|`.
    #[default]
    Adaptive,
    /// `F_sched -= mu / |lambda_F|` with no decay term.
    PureFeedback,
    /// `F_sched -= (F_sched - F_0) / r`, ignoring `lambda_F`.
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// In loss units (`mu / |lambda_F|` is a resource step): independent of the
    /// resource unit, but must be retuned if the loss scale changes.
    pub mu: Real,
    pub beta: Real,
    pub r: Real,
    /// Asymptote of the exponential decay, in resource units.
    pub f0: Real,
    pub lambda_guard: Real,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            mu: 1e-5,
            beta: 0.05,
            r: 30_000.0,
            f0: 0.0,
            lambda_guard: 1e-6,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.beta > 0.0 && self.r > 0.0 && self.f0 >= 0.0 && self.lambda_guard > 0.0) {
            return Err(Error::Config(format!("invalid controller settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerState {
    pub lambda_f: Real,
    pub f_sched: Real,
    pub iteration: u64,
}

/// All probabilities of all sites.
pub fn site_probs(sites: &[PruningSiteState]) -> Vec<Vec<Real>> {
    sites.iter().map(|s| s.probs()).collect()
}

/// `F_sched(0) = F(rho^0)`, `lambda_F = 0`.
pub fn init_schedule(poly: &ResourcePolynomial, sites: &[PruningSiteState]) -> ControllerState {
    ControllerState {
        lambda_f: 0.0,
        f_sched: poly.eval(&site_probs(sites)),
        iteration: 0,
    }
}

/// `lambda_F = -beta (F - F_sched) / K`. Replaces the previous value.
pub fn update_lambda(state: &mut ControllerState, f_current: Real, k: Real, cfg: &ControllerConfig) -> Result<Real> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Controller(format!(
            "sensitivity K = {k} at iteration {} (F = {f_current}, F_sched = {})",
            state.iteration, state.f_sched
        )));
    }
    if !f_current.is_finite() {
        return Err(Error::NonFinite {
            what: "resource estimate F".into(),
            detail: format!("{f_current} at iteration {}", state.iteration),
        });
    }
    state.lambda_f = -cfg.beta * (f_current - state.f_sched) / k;
    Ok(state.lambda_f)
}

/// `K = sum (dF/dp)^2 * sigmoid'(rho) * alpha / sqrt(D + floor)`.
pub fn compute_k(poly: &ResourcePolynomial, sites: &[PruningSiteState], cfg: &RhoSolverConfig) -> Real {
    let grad = poly.grad_p(&site_probs(sites));
    sites
        .iter()
        .zip(&grad)
        .flat_map(|(s, g)| {
            s.rho
                .iter()
                .zip(&s.d)
                .zip(g)
                .map(|((&r, &d), &gf)| gf * gf * sigmoid_prime(r) * cfg.alpha / (d + cfg.d_floor).sqrt())
        })
        .sum()
}

/// Step cap `M`: `mu / (|lambda_F| + guard)` for negative multipliers, unbounded otherwise.
pub fn step_cap(lambda_f: Real, cfg: &ControllerConfig) -> Real {
    if lambda_f < 0.0 {
        cfg.mu / (lambda_f.abs() + cfg.lambda_guard)
    } else {
        Real::INFINITY
    }
}

/// Advances `F_sched` by one iteration towards `f0`.
pub fn update_f_sched(state: &mut ControllerState, cfg: &ControllerConfig, kind: ScheduleKind, f0: Real) -> Real {
    let fs = state.f_sched;
    state.f_sched = match kind {
        ScheduleKind::Adaptive => {
            let m = step_cap(state.lambda_f, cfg);
            fs - ((fs - f0) / cfg.r).clamp(-m, m)
        }
        ScheduleKind::Exponential => fs - (fs - f0) / cfg.r,
        ScheduleKind::PureFeedback => (fs - cfg.mu / (state.lambda_f.abs() + cfg.lambda_guard)).max(f0),
    };
    state.f_sched
}

/// Values logged for one control step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// `F(rho^i)` before the update.
    pub f: Real,
    /// `F_sched(i)` before the update.
    pub f_sched: Real,
    /// Multiplier used by this iteration's rho update.
    pub lambda_f: Real,
    pub k: Real,
}

/// Per-iteration inputs of the control step.
pub struct ControlInputs<'a> {
    /// `dL0/dp` estimate per site and channel.
    pub l0p: &'a [Vec<Real>],
    pub kind: ScheduleKind,
    pub f0: Real,
}

/// Runs K, lambda, rho and F_sched updates for one iteration, in that order.
///
/// With `alpha = 0` the gates are frozen, `K` vanishes and `lambda_F` is
/// held at 0.
pub fn control_step(
    state: &mut ControllerState,
    sites: &mut [PruningSiteState],
    poly: &ResourcePolynomial,
    rho_cfg: &RhoSolverConfig,
    cfg: &ControllerConfig,
    inputs: ControlInputs<'_>,
) -> Result<StepReport> {
    let probs = site_probs(sites);
    let f = poly.eval(&probs);
    let f_sched = state.f_sched;
    let k = compute_k(poly, sites, rho_cfg);
    if rho_cfg.alpha > 0.0 {
        update_lambda(state, f, k, cfg)?;
        let grad = poly.grad_p(&probs);
        for ((site, l0p), g) in sites.iter_mut().zip(inputs.l0p).zip(&grad) {
            rho_step(site, l0p, g, state.lambda_f, rho_cfg)?;
        }
    } else {
        state.lambda_f = 0.0;
    }
    update_f_sched(state, cfg, inputs.kind, inputs.f0);
    state.iteration += 1;
    Ok(StepReport {
        f,
        f_sched,
        lambda_f: state.lambda_f,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resource::{Binding, PolynomialBuilder, ResourceKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cfg() -> ControllerConfig {
        ControllerConfig::default()
    }

    fn state(lambda_f: Real, f_sched: Real) -> ControllerState {
        ControllerState {
            lambda_f,
            f_sched,
            iteration: 0,
        }
    }

    #[test]
    fn lambda_zero_on_budget() {
        let mut s = state(3.0, 500.0);
        assert_eq!(update_lambda(&mut s, 500.0, 10.0, &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn lambda_sign_follows_budget() {
        let mut s = state(0.0, 1000.0);
        let over = update_lambda(&mut s, 1100.0, 1000.0, &cfg()).unwrap();
        assert!((over + 0.005).abs() < 1e-15);
        let under = update_lambda(&mut s, 900.0, 1000.0, &cfg()).unwrap();
        assert!((under - 0.005).abs() < 1e-15);
    }

    #[test]
    fn lambda_rejects_bad_sensitivity() {
        let mut s = state(0.0, 1.0);
        for k in [0.0, -1.0, Real::NAN, Real::INFINITY] {
            assert!(matches!(update_lambda(&mut s, 2.0, k, &cfg()), Err(Error::Controller(_))));
        }
    }

    #[test]
    fn schedule_exponential_step_when_lambda_nonnegative() {
        let c = ControllerConfig { r: 30_000.0, ..cfg() };
        let mut s = state(0.01, 1.0);
        update_f_sched(&mut s, &c, ScheduleKind::Adaptive, 0.0);
        assert!((s.f_sched - (1.0 - 1.0 / 30_000.0)).abs() < 1e-16);
        assert!((s.f_sched - 0.999967).abs() < 1e-6);
    }

    #[test]
    fn schedule_cap_not_binding_for_small_lambda() {
        let c = ControllerConfig { mu: 1e-5, ..cfg() };
        let m = step_cap(-0.01, &c);
        assert!((m - 1e-5 / (0.01 + 1e-6)).abs() < 1e-18);
        assert!((m - 9.99e-4).abs() < 1e-6);
        let mut s = state(-0.01, 1.0);
        update_f_sched(&mut s, &c, ScheduleKind::Adaptive, 0.0);
        assert!((1.0 - s.f_sched - 1.0 / 30_000.0).abs() < 1e-16);
    }

    #[test]
    fn schedule_nearly_frozen_under_pressure() {
        let c = ControllerConfig { mu: 1e-5, ..cfg() };
        let mut s = state(-10.0, 1.0);
        update_f_sched(&mut s, &c, ScheduleKind::Adaptive, 0.0);
        let m = 1e-5 / (10.0 + 1e-6);
        assert!((1.0 - s.f_sched - m).abs() < 1e-16);
        assert!((m - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn freezing_with_f0_at_current_value() {
        let mut s = state(0.5, 0.7);
        update_f_sched(&mut s, &cfg(), ScheduleKind::Adaptive, 0.7);
        assert_eq!(s.f_sched, 0.7);
    }

    #[test]
    fn pure_feedback_and_exponential_kinds() {
        let c = ControllerConfig { mu: 1e-3, r: 100.0, ..cfg() };
        let mut s = state(-0.5, 10.0);
        update_f_sched(&mut s, &c, ScheduleKind::PureFeedback, 0.0);
        assert!((10.0 - s.f_sched - 1e-3 / (0.5 + 1e-6)).abs() < 1e-12);
        let mut s = state(-1e9, 10.0);
        update_f_sched(&mut s, &c, ScheduleKind::Exponential, 2.0);
        assert!((s.f_sched - (10.0 - 8.0 / 100.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn schedule_non_increasing_above_f0(
            lambdas in proptest::collection::vec(-100.0..100.0f64, 1..200),
            f0 in 0.0..10.0f64,
            start in 10.0..1000.0f64,
        ) {
            let c = ControllerConfig { mu: 1e-2, r: 50.0, ..cfg() };
            let mut s = state(0.0, start as Real);
            for l in lambdas {
                s.lambda_f = l as Real;
                let before = s.f_sched;
                update_f_sched(&mut s, &c, ScheduleKind::Adaptive, f0 as Real);
                prop_assert!(s.f_sched <= before);
                prop_assert!(s.f_sched >= f0 as Real);
            }
        }

        #[test]
        fn lambda_has_sign_of_slack(f in 0.0..1e6f64, fs in 0.0..1e6f64, k in 1e-6..1e6f64) {
            let mut s = state(0.0, fs as Real);
            let l = update_lambda(&mut s, f as Real, k as Real, &cfg()).unwrap();
            let slack = fs - f;
            prop_assert!(slack == 0.0 || l.signum() == slack.signum() as Real);
        }
    }

    fn one_site_linear(n: usize, g: Real) -> ResourcePolynomial {
        let mut b = PolynomialBuilder::new(ResourceKind::Macs, vec!["s".into()], vec![n]);
        let out: Vec<Binding> = (0..n).map(|c| Some((0, c))).collect();
        b.add_layer("l", &[None], &out, g);
        b.finish()
    }

    #[test]
    fn k_single_channel_by_hand() {
        let poly = one_site_linear(1, 40.0);
        let rc = RhoSolverConfig::default();
        let site = PruningSiteState {
            name: "s".into(),
            rho: vec![0.7],
            d: vec![0.25],
        };
        let k = compute_k(&poly, &[site.clone()], &rc);
        let expect = 40.0 * 40.0 * sigmoid_prime(0.7) * 0.03 / (0.25 + 1e-12 as Real).sqrt();
        assert!((k - expect).abs() < 1e-12 * expect);

        let doubled = one_site_linear(1, 80.0);
        let k2 = compute_k(&doubled, &[site], &rc);
        assert!((k2 / k - 4.0).abs() < 1e-12);

        let sat = PruningSiteState {
            name: "s".into(),
            rho: vec![12.0],
            d: vec![0.25],
        };
        let ks = compute_k(&poly, &[sat], &rc);
        assert!((ks / expect - sigmoid_prime(12.0) / sigmoid_prime(0.7)).abs() < 1e-9);
    }

    /// Quadratic data loss `sum a_c (1 - p_c)^2` (plus noise) with linear F.
    struct Testbed {
        importance: Vec<Real>,
        noise: Real,
        rng: rand_chacha::ChaCha8Rng,
    }

    impl Testbed {
        fn new(n: usize, seed: u64) -> Self {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let importance = (0..n).map(|_| rng.gen_range(0.01..0.3)).collect();
            Self {
                importance,
                noise: 3.0,
                rng,
            }
        }

        fn l0p(&mut self, site: &PruningSiteState) -> Vec<Real> {
            site.probs()
                .iter()
                .zip(&self.importance)
                .map(|(p, a)| -2.0 * a * (1.0 - p) - 0.02 * a + self.noise * self.rng.gen_range(-1.0..1.0))
                .collect()
        }
    }

    fn simulate(poly: &ResourcePolynomial, ccfg: &ControllerConfig, iters: usize, seed: u64) -> Vec<(StepReport, Real)> {
        let n = poly.site_channels[0];
        let rc = RhoSolverConfig::default();
        let mut sites = vec![PruningSiteState::open("s", n, 12.0)];
        let mut st = init_schedule(poly, &sites);
        let mut bed = Testbed::new(n, seed);
        let mut out = Vec::new();
        for _ in 0..iters {
            let l0p = vec![bed.l0p(&sites[0])];
            let rep = control_step(
                &mut st,
                &mut sites,
                poly,
                &rc,
                ccfg,
                ControlInputs {
                    l0p: &l0p,
                    kind: ScheduleKind::Adaptive,
                    f0: ccfg.f0,
                },
            )
            .unwrap();
            let w = ResourcePolynomial::site_fractions(&site_probs(&sites))[0];
            out.push((rep, w));
        }
        out
    }

    #[test]
    fn closed_loop_tracks_schedule() {
        let poly = one_site_linear(64, 1000.0);
        let ccfg = ControllerConfig {
            r: 2000.0,
            mu: 4e-3,
            ..cfg()
        };
        let trace = simulate(&poly, &ccfg, 3000, 7);
        let f0 = trace[0].0.f;
        let last = trace.last().unwrap().0;
        assert!(last.f < 0.6 * f0, "did not prune: {}", last.f / f0);
        // Tracking is checked over the 100% -> 50% taper.
        for (i, (r, _)) in trace.iter().enumerate().skip(500).take_while(|(_, (r, _))| r.f > 0.5 * f0) {
            assert!((r.f - r.f_sched).abs() / f0 < 0.02, "iteration {i}: F={} F_sched={}", r.f, r.f_sched);
            assert!(r.lambda_f == 0.0 || r.lambda_f.signum() == (r.f_sched - r.f).signum());
        }
    }

    #[test]
    fn unit_rescaling_leaves_fractions_unchanged() {
        let poly = one_site_linear(32, 1000.0);
        let ccfg = ControllerConfig {
            r: 1500.0,
            mu: 1e-2,
            lambda_guard: 1e-30,
            ..cfg()
        };
        let scale = 1e-3;
        let kpoly = poly.rescaled(scale);
        // mu is in loss units, so it carries over unchanged.
        let kcfg = ccfg;
        let a = simulate(&poly, &ccfg, 1500, 3);
        let b = simulate(&kpoly, &kcfg, 1500, 3);
        for ((ra, wa), (rb, wb)) in a.iter().zip(&b) {
            assert!((wa - wb).abs() < 1e-6, "{wa} vs {wb}");
            if ra.lambda_f != 0.0 {
                assert!((rb.lambda_f * scale / ra.lambda_f - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frozen_gates_leave_lambda_at_zero() {
        let poly = one_site_linear(4, 10.0);
        let rc = RhoSolverConfig { alpha: 0.0, ..Default::default() };
        let mut sites = vec![PruningSiteState::open("s", 4, 12.0)];
        let mut st = init_schedule(&poly, &sites);
        let c = ControllerConfig { r: 10.0, ..cfg() };
        let f_init = st.f_sched;
        for i in 0..50 {
            let rep = control_step(
                &mut st,
                &mut sites,
                &poly,
                &rc,
                &c,
                ControlInputs {
                    l0p: &[vec![1.0; 4]],
                    kind: ScheduleKind::Adaptive,
                    f0: 0.0,
                },
            )
            .unwrap();
            assert_eq!(rep.lambda_f, 0.0);
            let closed = f_init * (0.9 as Real).powi(i + 1);
            assert!((st.f_sched - closed).abs() <= 1e-13 * f_init);
        }
    }
}
