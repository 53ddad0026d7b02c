use proptest::prelude::*;
use tendon_core::constitutive::{fibril_stress, linear_modulus};
use tendon_core::dataio::{clip_to_max_stress, truncate};
use tendon_core::fidelity::{prior_cholesky, prior_covariance};
use tendon_core::{
    engineering_stress, from_unconstrained, recruitment_cdf, strain_energy, to_unconstrained,
    Experiment, FidelityPriorSpec, ModelParams, TendonType, UnconstrainedParams,
};

fn params() -> impl Strategy<Value = ModelParams> {
    (0.01f64..20.0, 10.0f64..3000.0, 1.0005f64..1.08, 0.001f64..0.08)
        .prop_map(|(mu, e, a, w)| ModelParams::new(mu, e, a, a + w).unwrap())
}

fn experiment() -> impl Strategy<Value = Experiment> {
    prop::collection::vec((0.0005f64..0.01, -5.0f64..50.0), 2..60).prop_map(|steps| {
        let mut l = 1.0;
        let (stretch, stress) = steps
            .into_iter()
            .map(|(dl, s)| {
                l += dl;
                (l, s)
            })
            .unzip();
        Experiment::new("p", TendonType::Sdft, stretch, stress).unwrap()
    })
}

proptest! {
    #[test]
    fn unconstrained_roundtrip(nu in -5.0f64..5.0, eta in 0.0f64..9.0, tau in -8.0f64..-1.0, rho in -8.0f64..-1.0) {
        let xi = UnconstrainedParams::new(nu, eta, tau, rho);
        let back = to_unconstrained(&from_unconstrained(&xi)).unwrap().to_array();
        for (x, y) in xi.to_array().iter().zip(back) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn stress_increases_with_stretch(p in params(), l in 1.0f64..1.2, dl in 1e-4f64..0.05) {
        let lo = engineering_stress(l, &p).unwrap();
        let hi = engineering_stress(l + dl, &p).unwrap();
        prop_assert!(hi > lo);
        prop_assert!(fibril_stress(l + dl, &p).unwrap() >= fibril_stress(l, &p).unwrap());
    }

    #[test]
    fn energy_is_nonnegative_and_increasing(p in params(), l in 1.0f64..1.2, dl in 1e-4f64..0.05) {
        let w = strain_energy(l, &p).unwrap();
        prop_assert!(w >= 0.0);
        prop_assert!(strain_energy(l + dl, &p).unwrap() > w);
    }

    #[test]
    fn energy_slope_is_stress(p in params(), l in 1.001f64..1.2) {
        let h = 1e-6;
        prop_assume!([p.a, 0.5 * (p.a + p.b), p.b].iter().all(|k| (l - k).abs() > 10.0 * h));
        let slope = (strain_energy(l + h, &p).unwrap() - strain_energy(l - h, &p).unwrap()) / (2.0 * h);
        let n = engineering_stress(l, &p).unwrap();
        prop_assert!((slope - n).abs() <= 1e-5 * n.abs().max(1e-8), "slope {} vs N {}", slope, n);
    }

    #[test]
    fn recruitment_cdf_is_monotone_probability(a in 1.0001f64..1.1, w in 1e-3f64..0.1, x in 0.9f64..1.3, dx in 0.0f64..0.1) {
        let lo = recruitment_cdf(x, a, a + w).unwrap();
        let hi = recruitment_cdf(x + dx, a, a + w).unwrap();
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        prop_assert!(hi >= lo);
    }

    #[test]
    fn linear_modulus_is_below_fibril_modulus(p in params(), extra in 0.0f64..0.1) {
        let lm = linear_modulus(&p, p.b + extra).unwrap();
        prop_assert!(lm > 0.0 && lm < p.fibril_term);
    }

    #[test]
    fn prior_covariance_is_symmetric_and_factorisable(exp in experiment()) {
        let spec = FidelityPriorSpec::default();
        let cov = prior_covariance(exp.stretch(), &spec).unwrap();
        prop_assert_eq!(cov.clone(), cov.transpose());
        prop_assert!(cov.diagonal().iter().all(|d| *d > 0.0));
        prop_assert!(prior_cholesky(exp.stretch(), &spec).is_ok());
    }

    #[test]
    fn clipping_keeps_a_prefix_ending_at_the_peak(exp in experiment()) {
        let clipped = clip_to_max_stress(&exp);
        let n = clipped.len();
        prop_assert!(n >= 2 && n <= exp.len());
        prop_assert_eq!(clipped.stretch(), &exp.stretch()[..n]);
        prop_assert_eq!(clipped.stress(), &exp.stress()[..n]);
        let peak = exp.stress().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(clipped.stress().iter().all(|s| *s <= peak));
        if n > 2 {
            prop_assert_eq!(clipped.stress()[n - 1], peak);
        }
    }

    #[test]
    fn truncation_stops_at_first_low_fidelity(exp in experiment(), seed in prop::collection::vec(0.001f64..0.999, 60), threshold in 0.05f64..0.95) {
        let means = &seed[..exp.len()];
        match truncate(&exp, means, threshold) {
            Ok(t) => {
                let n = t.len();
                prop_assert_eq!(t.stretch(), &exp.stretch()[..n]);
                prop_assert!(means[..n].iter().all(|m| *m >= threshold));
                prop_assert!(t.weights().iter().all(|w| *w > 0.0 && *w < 1.0));
                if n < exp.len() {
                    prop_assert!(means[n] < threshold);
                    prop_assert_eq!(t.truncation_index(), Some(n));
                } else {
                    prop_assert_eq!(t.truncation_index(), None);
                }
            }
            Err(_) => prop_assert!(means[..2].iter().any(|m| *m < threshold)),
        }
    }
}
