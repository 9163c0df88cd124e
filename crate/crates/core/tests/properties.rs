mod common;

use proptest::prelude::*;
use taper_prune::gate::{gate_boundaries, gate_slope, gate_value, retention_gradient, sigmoid, GateConfig};
use taper_prune::tape::Tape;
use taper_prune::Real;

fn gate_cfg() -> impl Strategy<Value = GateConfig> {
    (0.0..=1.0f64, 0.001..0.5f64).prop_map(|(epsilon, kappa)| GateConfig {
        epsilon: epsilon as Real,
        kappa: kappa as Real,
        ..GateConfig::default()
    })
}

proptest! {
    #[test]
    fn gate_factor_is_bounded_and_monotone(
        cfg in gate_cfg(),
        rho in -12.0..12.0f64,
        x in 0.0..1.0f64,
        dx in 0.0..0.2f64,
        drho in 0.0..2.0f64,
    ) {
        let (rho, x) = (rho as Real, x as Real);
        let h = gate_value(rho, x, &cfg);
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!(gate_value(rho, x + dx as Real, &cfg) <= h);
        prop_assert!(gate_value(rho + drho as Real, x, &cfg) >= h);
    }

    #[test]
    fn gate_is_lipschitz_in_the_noise(cfg in gate_cfg(), rho in -12.0..12.0f64, x in 0.0..1.0f64, y in 0.0..1.0f64) {
        let rho = rho as Real;
        let (lo, hi) = gate_boundaries(rho, &cfg);
        prop_assume!(hi > lo);
        let d = (gate_value(rho, x as Real, &cfg) - gate_value(rho, y as Real, &cfg)).abs();
        prop_assert!(d <= (x - y).abs() as Real / (hi - lo) * (1.0 + 1e-9) + 1e-15);
        let s = gate_slope(rho, x as Real, &cfg);
        prop_assert!(s == 0.0 || (s + 1.0 / (hi - lo)).abs() < 1e-9 / (hi - lo));
    }

    #[test]
    fn retention_probability_lies_inside_the_gap(cfg in gate_cfg(), rho in -12.0..12.0f64) {
        let rho = rho as Real;
        let (lo, hi) = gate_boundaries(rho, &cfg);
        let p = sigmoid(rho);
        prop_assert!(lo <= p && p <= hi);
        prop_assert!(hi - lo >= cfg.epsilon * cfg.kappa * (1.0 - 1e-12));
        // Mean factor over uniform noise, by midpoint quadrature.
        let n = 20_000;
        let mean: Real = (0..n).map(|i| gate_value(rho, (i as Real + 0.5) / n as Real, &cfg)).sum::<Real>() / n as Real;
        prop_assert!((mean - p).abs() <= (hi - lo) / 2.0 + 1e-4);
    }

    #[test]
    fn retention_gradient_negates_channel_sums(batch in 1usize..5, channels in 1usize..6, seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let t = common::rand_tensor(&mut r, &[batch * channels]);
        let g = retention_gradient(t.data(), channels);
        for (c, gc) in g.iter().enumerate() {
            let s: Real = (0..batch).map(|n| t.data()[n * channels + c]).sum();
            prop_assert!((gc + s).abs() < 1e-12);
        }
    }

    #[test]
    fn reused_variables_accumulate_gradients(n in 1usize..20, seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let x = common::rand_tensor(&mut r, &[n]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let twice = tape.add(v, v).unwrap();
        let sq = tape.mul(twice, v).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        // d/dx sum(2 x^2) = 4 x
        let g = tape.grad(v).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            prop_assert!((gi - 4.0 * xi).abs() < 1e-12);
        }
    }
}

#[test]
fn gap_widths_match_logistic_oracle() {
    // Frozen from direct evaluation of the logistic function at default kappa.
    let cases: [(Real, Real, Real); 4] = [
        (0.5, 0.0, 0.260_020_289_2),
        (0.25, 0.0, 0.133_109_471_8),
        (0.1, 0.0, 0.053_758_541_5),
        (0.01, 0.0, 0.005_397_958_4),
    ];
    for (eps, rho, want) in cases {
        let cfg = GateConfig {
            epsilon: eps,
            ..GateConfig::default()
        };
        let (lo, hi) = gate_boundaries(rho, &cfg);
        assert!((hi - lo - want).abs() < 1e-9, "eps {eps}: {}", hi - lo);
    }
}
