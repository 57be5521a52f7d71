use proptest::prelude::*;

use crw_core::analysis::fit_exponent;
use crw_core::dp::{evolve, hit_probability, solve_extremal, Objective, Retention, Target};
use crw_core::lattice::HitFlag;
use crw_core::policy::{constant_policy, two_zone_policy, BangBangTable};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn evolution_conserves_mass(q in 0.0..0.99f64, band in 0u64..20, n in 0usize..120, start in -10i64..10) {
        let d = evolve(&two_zone_policy(q, band).unwrap(), n, start).unwrap();
        prop_assert!((d.total_mass() - 1.0).abs() < 1e-12);
        let (lo, hi) = d.support().unwrap();
        prop_assert!(lo >= start - n as i64 && hi <= start + n as i64);
    }

    #[test]
    fn symmetric_policies_give_symmetric_laws(q in 0.0..0.99f64, band in 0u64..12, n in 1usize..80) {
        let d = evolve(&two_zone_policy(q, band).unwrap(), n, 0).unwrap();
        for x in 1..=n as i64 {
            prop_assert!((d.mass_at(x) - d.mass_at(-x)).abs() < 1e-14);
        }
    }

    #[test]
    fn random_tables_never_beat_the_optimum(q in 0.05..0.95f64, n in 1usize..24, bits in proptest::collection::vec(any::<bool>(), 24 * 49)) {
        let mut table = BangBangTable::new(q, n, n as u64 + 1);
        let r = n as i64;
        let mut k = 0;
        for t in 0..n {
            for x in -r..=r {
                table.set(t, x, bits[k % bits.len()]);
                k += 1;
            }
        }
        let p = hit_probability(&table.into_policy(), n, 0, Target::origin()).unwrap();
        let (hi, _) = solve_extremal(q, n, Objective::Max, Target::origin(), Retention::Streaming).unwrap();
        let (lo, _) = solve_extremal(q, n, Objective::Min, Target::origin(), Retention::Streaming).unwrap();
        prop_assert!(p <= hi.initial_value(0) + 1e-13);
        prop_assert!(p >= lo.initial_value(0) - 1e-13);
    }

    #[test]
    fn max_value_grows_with_the_cap(q in 0.05..0.9f64, dq in 0.0..0.09f64, n in 1usize..60) {
        let a = solve_extremal(q, n, Objective::Max, Target::origin(), Retention::Streaming).unwrap().0.initial_value(0);
        let b = solve_extremal(q + dq, n, Objective::Max, Target::origin(), Retention::Streaming).unwrap().0.initial_value(0);
        prop_assert!(b >= a - 1e-14);
    }

    #[test]
    fn constant_controls_are_admissible(q in 0.0..0.99f64, frac in 0.0..=1.0f64, x in -50i64..50) {
        let p = constant_policy(q, q * frac).unwrap();
        let u = p.evaluate(0, x, HitFlag::NotYetHit).unwrap();
        prop_assert!((0.0..=q).contains(&u));
    }

    #[test]
    fn fit_recovers_synthetic_exponents(sigma in 0.0..2.0f64, c in 0.01..10.0f64) {
        let pts: Vec<(usize, f64)> = (3..12).map(|k| 1usize << k).map(|n| (n, c * (n as f64).powf(-sigma))).collect();
        let f = fit_exponent(&pts).unwrap();
        prop_assert!((f.sigma_hat - sigma).abs() < 1e-12);
        prop_assert!((f.intercept - c.ln()).abs() < 1e-10);
        prop_assert!(f.r_squared > 1.0 - 1e-12);
    }
}
