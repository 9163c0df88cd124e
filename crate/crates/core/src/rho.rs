//! RMS-normalized solver for the pruning parameters.
//!
//! Per channel:
//!
//! ```text
//! D   <- (1 - delta) D + delta * g0^2          (data-loss part only)
//! g   =  g0 - lambda_F * dF/dp
//! rho <- clip(rho - alpha * clip(g / sqrt(D + floor), -3, 3), -rho_max, rho_max)
//! ```
//!
//! where `g0 = -sum_n dL0/dx` is the gate's estimate of `dL0/dp`. Gradients
//! are taken w.r.t. `p`, not `rho`, so saturated channels are not stuck on
//! the sigmoid plateau.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::gate::{sigmoid, sigmoid_prime};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RhoSolverConfig {
    pub alpha: Real,
    pub delta: Real,
    pub rho_max: Real,
    pub clip: Real,
    pub d_floor: Real,
}

impl Default for RhoSolverConfig {
    fn default() -> Self {
        Self {
            alpha: 0.03,
            delta: 1.0 / 200.0,
            rho_max: 12.0,
            clip: 3.0,
            d_floor: 1e-12,
        }
    }
}

impl RhoSolverConfig {
    pub fn validate(&self) -> Result<()> {
        // alpha = 0 is allowed: it freezes the gates.
        let ok = self.alpha >= 0.0 && self.delta > 0.0 && self.delta <= 1.0 && self.rho_max > 0.0;
        if !(ok && self.clip > 0.0 && self.d_floor > 0.0) {
            return Err(Error::Config(format!("invalid rho solver settings {self:?}")));
        }
        Ok(())
    }
}

/// Pruning parameters and solver accumulator for one site.
#[derive(Clone, Debug, PartialEq)]
pub struct PruningSiteState {
    pub name: String,
    pub rho: Vec<Real>,
    pub d: Vec<Real>,
}

impl PruningSiteState {
    /// All channels open at `rho = rho_max`.
    pub fn open(name: impl Into<String>, channels: usize, rho_max: Real) -> Self {
        Self {
            name: name.into(),
            rho: vec![rho_max; channels],
            d: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.rho.len()
    }

    /// Retention probabilities `sigmoid(rho)`.
    pub fn probs(&self) -> Vec<Real> {
        self.rho.iter().map(|&r| sigmoid(r)).collect()
    }

    /// Deterministic keep-mask used for inference and extraction.
    pub fn keep_mask(&self) -> Vec<bool> {
        self.rho.iter().map(|&r| r > 0.0).collect()
    }

    pub fn kept(&self) -> usize {
        self.rho.iter().filter(|&&r| r > 0.0).count()
    }
}

/// One solver step for a site.
pub fn rho_step(
    site: &mut PruningSiteState,
    l0p: &[Real],
    grad_f_p: &[Real],
    lambda_f: Real,
    cfg: &RhoSolverConfig,
) -> Result<()> {
    let n = site.channels();
    if l0p.len() != n {
        return Err(mismatch("rho step", format!("L0 gradient for site `{}`", site.name), n, l0p.len()));
    }
    if grad_f_p.len() != n {
        return Err(mismatch("rho step", format!("dF/dp for site `{}`", site.name), n, grad_f_p.len()));
    }
    if !lambda_f.is_finite() {
        return Err(Error::NonFinite {
            what: "lambda_F".into(),
            detail: format!("{lambda_f} at site `{}`", site.name),
        });
    }
    if let Some(c) = (0..n).find(|&c| !l0p[c].is_finite() || !grad_f_p[c].is_finite()) {
        return Err(Error::NonFinite {
            what: format!("pruning gradient of site `{}`", site.name),
            detail: format!("channel {c}: dL0/dp = {}, dF/dp = {}", l0p[c], grad_f_p[c]),
        });
    }
    for c in 0..n {
        site.d[c] = (1.0 - cfg.delta) * site.d[c] + cfg.delta * l0p[c] * l0p[c];
        let g = l0p[c] - lambda_f * grad_f_p[c];
        let normalized = (g / (site.d[c] + cfg.d_floor).sqrt()).clamp(-cfg.clip, cfg.clip);
        site.rho[c] = (site.rho[c] - cfg.alpha * normalized).clamp(-cfg.rho_max, cfg.rho_max);
    }
    Ok(())
}

/// Converts `dL/drho` into `dL/dp` by dividing by `sigmoid'(rho)`.
pub fn chain_rule_to_p(dl_drho: &[Real], rho: &[Real]) -> Vec<Real> {
    dl_drho.iter().zip(rho).map(|(g, &r)| g / sigmoid_prime(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn site(rho: Real, d: Real) -> PruningSiteState {
        PruningSiteState {
            name: "s".into(),
            rho: vec![rho],
            d: vec![d],
        }
    }

    #[test]
    fn no_gradient_only_decays_accumulator() {
        let cfg = RhoSolverConfig::default();
        let mut s = site(1.5, 2.0);
        rho_step(&mut s, &[0.0], &[3.0], 0.0, &cfg).unwrap();
        assert_eq!(s.rho, vec![1.5]);
        assert!((s.d[0] - 2.0 * (1.0 - 1.0 / 200.0)).abs() < 1e-15);
    }

    #[test]
    fn large_gradient_is_clipped() {
        // D stays at 1 when fed L0p = 1; the Lagrangian term adds 9 on top.
        let cfg = RhoSolverConfig {
            d_floor: 1e-300,
            ..Default::default()
        };
        let mut s = site(0.0, 1.0);
        rho_step(&mut s, &[1.0], &[1.0], -9.0, &cfg).unwrap();
        assert_eq!(s.d[0], 1.0);
        assert!((s.rho[0] + 0.09).abs() < 1e-15);
    }

    #[test]
    fn clip_holds_rho_at_bound() {
        let cfg = RhoSolverConfig::default();
        let mut s = site(12.0, 1.0);
        rho_step(&mut s, &[-5.0], &[0.0], 0.0, &cfg).unwrap();
        assert_eq!(s.rho[0], 12.0);
    }

    #[test]
    fn rejects_non_finite_and_mismatch() {
        let cfg = RhoSolverConfig::default();
        let mut s = site(0.0, 1.0);
        assert!(matches!(
            rho_step(&mut s, &[Real::NAN], &[0.0], 0.0, &cfg),
            Err(Error::NonFinite { .. })
        ));
        assert!(rho_step(&mut s, &[0.0, 1.0], &[0.0], 0.0, &cfg).is_err());
    }

    #[test]
    fn chain_rule_values() {
        assert_eq!(chain_rule_to_p(&[1.0], &[0.0]), vec![4.0]);
        let s = 1.0 / (1.0 + (-12.0 as Real).exp());
        let sp = s * (1.0 - s);
        assert!((sp - 6.144e-6).abs() < 1e-9, "{sp}");
        let g = chain_rule_to_p(&[sp * 0.7], &[12.0]);
        assert!((g[0] - 0.7).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn step_bounded_and_rho_in_range(
            steps in proptest::collection::vec((-50.0..50.0f64, 0.0..10.0f64, -5.0..5.0f64), 1..60),
            start in -12.0..12.0f64,
        ) {
            let cfg = RhoSolverConfig::default();
            let mut s = site(start as Real, 0.0);
            let mut max_seen: Real = 0.0;
            for (g0, gf, lam) in steps {
                let before = s.rho[0];
                rho_step(&mut s, &[g0 as Real], &[gf as Real], lam as Real, &cfg).unwrap();
                max_seen = max_seen.max((g0 * g0) as Real);
                prop_assert!((s.rho[0] - before).abs() <= 0.09 + 1e-12);
                prop_assert!(s.rho[0].abs() <= 12.0);
                prop_assert!(s.d[0] >= 0.0 && s.d[0] <= max_seen * (1.0 + 1e-12));
            }
        }

        #[test]
        fn chain_rule_inverts_sigmoid_prime(g in -10.0..10.0f64, r in -12.0..12.0f64) {
            let back = chain_rule_to_p(&[sigmoid_prime(r as Real) * g as Real], &[r as Real]);
            prop_assert!((back[0] - g as Real).abs() <= 1e-9 * (1.0 + (g as Real).abs()));
        }
    }

    #[test]
    fn normalization_is_scale_invariant_at_steady_state() {
        // Constant gradients g and c*g: after D adapts, update sizes agree.
        let cfg = RhoSolverConfig {
            rho_max: 1e9,
            ..Default::default()
        };
        for c in [0.01, 7.0, 1e4] {
            let mut a = site(0.0, 0.0);
            let mut b = site(0.0, 0.0);
            for _ in 0..1000 {
                rho_step(&mut a, &[0.3], &[0.0], 0.0, &cfg).unwrap();
                rho_step(&mut b, &[0.3 * c], &[0.0], 0.0, &cfg).unwrap();
            }
            let (ra, rb) = (a.rho[0], b.rho[0]);
            rho_step(&mut a, &[0.3], &[0.0], 0.0, &cfg).unwrap();
            rho_step(&mut b, &[0.3 * c], &[0.0], 0.0, &cfg).unwrap();
            let (da, db) = (a.rho[0] - ra, b.rho[0] - rb);
            assert_eq!(da.signum(), db.signum());
            assert!(((da - db) / da).abs() < 0.01, "{da} vs {db}");
        }
    }
}
