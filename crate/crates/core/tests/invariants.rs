use std::f64::consts::FRAC_PI_2;

use jacobi_lab::cocycle::pow_by_squaring;
use jacobi_lab::randpert::{
    maximal_inequality_check, Distribution, FDescriptor, PerturbationModel, SiteLaw,
};
use jacobi_lab::singular::r_sequence;
use jacobi_lab::sparse::{envelope_exponents, s_threshold, Which};
use jacobi_lab::subordinacy::{solve_pair, wronskian};
use jacobi_lab::variation::conjugated_generators;
use jacobi_lab::{fast_const_power, single_step, Matrix2, OperatorSpec, Trajectory};
use proptest::prelude::*;

fn product(steps: &[(f64, f64)]) -> Matrix2 {
    steps
        .iter()
        .fold(Matrix2::IDENTITY, |t, &(e, b)| single_step(e, b, 1.0, 1.0).unwrap() * t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn generator_algebra(steps in prop::collection::vec((-3.0..3.0f64, -1.0..1.0f64), 1..8)) {
        let t = product(&steps);
        let g = conjugated_generators(&t).unwrap();
        let tol = 1e-12 * t.norm().powi(4);
        prop_assert!((g.u * g.u).max_abs() <= tol);
        prop_assert!((g.v * g.v - Matrix2::IDENTITY).max_abs() <= tol);
        prop_assert!((g.w * g.w - g.w).max_abs() <= tol);
        prop_assert!((g.w.trace() - 1.0).abs() <= tol);
    }

    #[test]
    fn fast_power_matches_squaring(e in -1.99..1.99f64, m in 0u128..5000) {
        let block = single_step(e, 0.0, 1.0, 1.0).unwrap();
        let fast = fast_const_power(&block, m).unwrap();
        let slow = pow_by_squaring(&block, m).unwrap();
        prop_assert!(fast.max_rel_diff(&slow) <= 1e-10);
    }

    #[test]
    fn wronskian_is_one(
        b in prop::collection::vec(-1.0..1.0f64, 5..60),
        e in -2.5..2.5f64,
        theta in -FRAC_PI_2..FRAC_PI_2,
    ) {
        let n = b.len() as u64;
        let spec = OperatorSpec::schrodinger(b, "random").unwrap();
        let (p1, p2) = solve_pair(&spec, e, theta, n).unwrap();
        for k in 1..=p1.last_site() {
            let scale = (p1.value(k) * p2.value(k - 1)).abs() + (p1.value(k - 1) * p2.value(k)).abs();
            prop_assert!((wronskian(&p1, &p2, k) - 1.0).abs() <= 1e-10 * scale.max(1.0));
        }
    }

    #[test]
    fn envelope_fit_is_scale_invariant(
        noise in prop::collection::vec(-0.5..0.5f64, 16),
        exponent in -0.4..0.4f64,
        c in 1e-3..1e3f64,
    ) {
        let sites: Vec<u128> = (1..=16).map(|j| 4u128.pow(j)).collect();
        let amps: Vec<f64> = sites
            .iter()
            .zip(&noise)
            .map(|(n, z)| (*n as f64).powf(exponent) * z.exp())
            .collect();
        let scaled: Vec<f64> = amps.iter().map(|a| a * c).collect();
        for which in [Which::Phi1, Which::Phi2] {
            let f = envelope_exponents(&sites, &amps, which).unwrap();
            let g = envelope_exponents(&sites, &scaled, which).unwrap();
            prop_assert!((f.beta1_hat - g.beta1_hat).abs() <= 1e-9);
            prop_assert!((f.beta2_hat - g.beta2_hat).abs() <= 1e-9);
            prop_assert!(f.beta1_hat <= f.beta2_hat + 1e-12);
        }
    }

    #[test]
    fn threshold_exceeds_eta_bound(b2 in 0.0..0.49f64, t in 0.0..1.0f64) {
        let b1 = b2 * t;
        let s = s_threshold(b1, b2).unwrap();
        prop_assert!((s.threshold - s.eta_bound - (0.5 - 2.0 * b1)).abs() <= 1e-12);
    }

    #[test]
    fn r_is_monotone_in_eta_tilde(
        vals in prop::collection::vec(-2.0..2.0f64, 10..40),
        lo in 0.01..1.0f64,
        gap in 0.0..1.0f64,
    ) {
        let p1 = Trajectory::new(vals.clone(), "t".into(), 0.0, 0.0);
        let p2 = Trajectory::new(vals.iter().rev().copied().collect(), "t".into(), 0.0, 0.0);
        let n = (vals.len() - 1) as u64;
        let r_lo = r_sequence(&p1, &p2, lo, n).unwrap();
        let r_hi = r_sequence(&p1, &p2, lo + gap, n).unwrap();
        for (a, b) in r_lo.iter().zip(&r_hi) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn exact_inequality_variance_additivity(n1 in 1u64..10, span in 0u64..12, r in 0.3..4.0f64) {
        let model = PerturbationModel::diagonal(SiteLaw::new(Distribution::Rademacher { c: 1.0 }, 0.5));
        let f = FDescriptor::Shifted { offset: 2, scale: 1.5 };
        let rep = maximal_inequality_check(&model, &f, n1, n1 + span, r, 0, 0).unwrap();
        prop_assert!(rep.exact);
        prop_assert!((rep.second_moment_of_sum - rep.sum_variance).abs() <= 1e-12 * rep.sum_variance.max(1.0));
        prop_assert!(rep.empirical_prob <= rep.bound);
    }

    #[test]
    fn realizations_are_reproducible(seed in any::<u64>(), s in 0.0..2.0f64) {
        let model = PerturbationModel::uniform_decay(s);
        let a = model.sample(seed, 64);
        let b = model.sample(seed, 64);
        prop_assert_eq!(&a.b_tilde, &b.b_tilde);
        for n in 1..=64 {
            prop_assert_eq!(model.sample_b_site(seed, n), a.b(n));
            prop_assert!(a.b(n).abs() <= (n as f64).powf(-s) + 1e-15);
        }
    }
}
