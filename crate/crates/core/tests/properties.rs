use proptest::prelude::*;
use smartsize_core::contrast::{delta_gradient, delta_of_beta};
use smartsize_core::copula::{build_latent_correlation, check_positive_definite};
use smartsize_core::distributions::{
    nb_cdf, nb_pmf, nb_quantile, solve_dispersion_from_zero_mass, zero_mass, CountRegion, DiscreteMarginal,
};
use smartsize_core::ipwre::fit_trial;
use smartsize_core::presets::effect_scenario;
use smartsize_core::trial::subgroup_sizes;
use smartsize_core::*;

fn nb() -> impl Strategy<Value = NbParams> {
    (0.2f64..12.0, 0.05f64..6.0).prop_map(|(mu, zeta)| NbParams::new(mu, zeta).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pmf_sums_to_cdf(p in nb(), y in 0u64..40) {
        let s: f64 = (0..=y).map(|k| nb_pmf(k, &p)).sum();
        prop_assert!((s - nb_cdf(y, &p)).abs() < 1e-10);
        prop_assert!(nb_cdf(y + 1, &p) >= nb_cdf(y, &p));
    }

    #[test]
    fn quantile_inverts_cdf(p in nb(), u in 0.0f64..0.999) {
        let y = nb_quantile(u, &p).unwrap();
        prop_assert!(nb_cdf(y, &p) >= u - 1e-12);
        if y > 0 {
            prop_assert!(nb_cdf(y - 1, &p) < u + 1e-12);
        }
    }

    #[test]
    fn dispersion_solver_round_trips(mu in 0.5f64..8.0, gap in 0.02f64..0.9) {
        let floor = (-mu).exp();
        let pi0 = floor + gap * (0.95 - floor);
        let z = solve_dispersion_from_zero_mass(mu, pi0).unwrap();
        prop_assert!((zero_mass(mu, z) - pi0).abs() < 1e-7);
    }

    #[test]
    fn below_floor_is_rejected(mu in 0.5f64..8.0, frac in 0.0f64..0.99) {
        let pi0 = (-mu).exp() * frac;
        prop_assert!(solve_dispersion_from_zero_mass(mu, pi0).is_err());
    }

    #[test]
    fn truncated_marginals_stay_in_region(p in nb(), c in 0u64..4, u in 0.0f64..0.9999) {
        let rule = ResponseRule::AtMost { c };
        if let Ok(m) = DiscreteMarginal::new(p, CountRegion::Responder(rule)) {
            prop_assert!(u64::from(m.quantile(u)) <= c);
        }
        if let Ok(m) = DiscreteMarginal::new(p, CountRegion::NonResponder(rule)) {
            prop_assert!(u64::from(m.quantile(u)) > c);
        }
    }

    #[test]
    fn latent_matrices_are_symmetric_unit_diagonal(rho in 0.0f64..0.9, frac in 0.0f64..1.0, exch in any::<bool>()) {
        let design = TrialDesign::monthly(6, 2, ResponseRule::AtMost { c: 0 }).unwrap();
        let structure = if exch { Structure::Exchangeable } else { Structure::Ar1 };
        let spec = DependenceSpec::with_eta(structure, rho, rho * frac).unwrap();
        for g in Subgroup::ALL {
            let m = build_latent_correlation(g, &design, &spec).matrix;
            for i in 0..m.nrows() {
                prop_assert_eq!(m[(i, i)], 1.0);
                for j in 0..i {
                    prop_assert_eq!(m[(i, j)], m[(j, i)]);
                    prop_assert!(m[(i, j)].abs() <= 1.0);
                }
            }
        }
        // eta at or below rho/2 keeps every subgroup matrix positive definite here
        if frac <= 0.5 {
            for g in Subgroup::ALL {
                prop_assert!(check_positive_definite(&build_latent_correlation(g, &design, &spec)).is_ok());
            }
        }
    }

    #[test]
    fn subgroup_sizes_partition_n(n in 10usize..5000, p in 0.05f64..0.95, q in 0.05f64..0.95) {
        let s = subgroup_sizes(n, p, q, None).unwrap();
        prop_assert_eq!(s.total(), n);
        let nr_plus = s.n[2] + s.n[3];
        let nr_minus = s.n[1] + s.n[3];
        let want_plus = (n as f64 * (1.0 - p) - 1e-9).ceil() as usize;
        let want_minus = (n as f64 * (1.0 - q) - 1e-9).ceil() as usize;
        prop_assert!(nr_plus.abs_diff(want_plus) <= 1);
        prop_assert!(nr_minus.abs_diff(want_minus) <= 1);
    }

    #[test]
    fn gradient_matches_central_differences(shift in prop::collection::vec(-0.5f64..0.5, 19), auc in any::<bool>()) {
        let study = effect_scenario(3).resolve().unwrap();
        let kind = if auc { Estimand::Auc } else { Estimand::EndOfStudy };
        let l = contrast_weights(kind, study.design.times()).unwrap();
        let beta = nalgebra::DVector::from_vec(shift);
        let g = delta_gradient(&beta, study.pair, &l, &study.design);
        let h = 1e-6;
        for i in 0..beta.len() {
            let (mut up, mut dn) = (beta.clone(), beta.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (delta_of_beta(&up, study.pair, &l, &study.design) - delta_of_beta(&dn, study.pair, &l, &study.design)) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-6 * g.amax().max(1.0));
        }
        let swapped = (study.pair.1, study.pair.0);
        prop_assert!((delta_of_beta(&beta, swapped, &l, &study.design) + delta_of_beta(&beta, study.pair, &l, &study.design)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fit_ignores_participant_order(seed in any::<u32>(), rot in 1usize..299) {
        let mut cfg = effect_scenario(2);
        cfg.monte_carlo.seed = u64::from(seed);
        let study = cfg.resolve().unwrap();
        let dep = DependenceSpec::new(Structure::Ar1, 0.4).unwrap();
        let engine = PowerEngine::new(study.power_config(dep)).unwrap();
        let mut trial = engine.simulate(300, 0).unwrap();
        let a = fit_trial(&trial, &study.design).unwrap();
        trial.participants.rotate_left(rot);
        let b = fit_trial(&trial, &study.design).unwrap();
        for (x, y) in a.beta.iter().zip(b.beta.iter()) {
            prop_assert!((x - y).abs() < 1e-8);
        }
        for (x, y) in a.covariance.iter().zip(b.covariance.iter()) {
            prop_assert!((x - y).abs() < 1e-8 * a.covariance.amax());
        }
    }
}
