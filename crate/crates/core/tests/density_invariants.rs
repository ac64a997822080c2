use popinterp::density::{BinFamily, KnotVector, PiecewiseDensity};
use popinterp::model::stick_from_probs;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Knots 0 < k1 < ... with an unbounded top bin; uniform bins below `split`,
/// truncated Pareto from there, unbounded Pareto on top.
fn density() -> impl Strategy<Value = PiecewiseDensity> {
    (3usize..8)
        .prop_flat_map(|k| {
            (
                prop::collection::vec(1.0f64..50.0, k - 1),
                prop::collection::vec(0.01f64..1.0, k),
                prop::collection::vec(0.3f64..4.0, k),
                1.1f64..4.0,
                1usize..k,
            )
        })
        .prop_map(|(gaps, weights, alphas, top, split)| {
            let mut finite = vec![0.0];
            for g in &gaps {
                finite.push(finite.last().unwrap() + g);
            }
            let k = weights.len();
            let total: f64 = weights.iter().sum();
            let probs = weights.iter().map(|w| w / total).collect();
            let families = (0..k)
                .map(|i| match i {
                    _ if i == k - 1 => BinFamily::UnboundedPareto { alpha: top },
                    _ if i >= split => BinFamily::TruncatedPareto { alpha: alphas[i] },
                    _ => BinFamily::Uniform,
                })
                .collect();
            PiecewiseDensity::new(KnotVector::new(finite, true).unwrap(), probs, families).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quantile_inverts_cdf(d in density(), tau in 0.001f64..0.999) {
        let x = d.quantile(tau).unwrap();
        prop_assert!((d.cdf(x) - tau).abs() < 1e-9);
    }

    #[test]
    fn cdf_is_monotone_and_matches_bin_masses(d in density(), a in 0.0f64..300.0, w in 0.0f64..100.0) {
        prop_assert!(d.cdf(a) <= d.cdf(a + w) + 1e-15);
        let knots = d.knots().finite_knots();
        for (k, pair) in knots.windows(2).enumerate() {
            prop_assert!((d.cdf(pair[1]) - d.cumulative()[k + 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn draws_land_in_support(d in density(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in d.sample(50, &mut rng) {
            prop_assert!(x.is_finite() && x >= 0.0);
            prop_assert!(d.knots().bin_of(x).is_some());
        }
    }

    #[test]
    fn serde_round_trip_is_exact(d in density()) {
        let json = serde_json::to_string(&d).unwrap();
        let back: PiecewiseDensity = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn stick_coordinates_are_finite(weights in prop::collection::vec(0.001f64..1.0, 2..12)) {
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let stick = stick_from_probs(&probs);
        prop_assert_eq!(stick.len(), probs.len() - 1);
        prop_assert!(stick.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn equal_probabilities_map_to_the_zero_stick() {
    for k in 2..10 {
        let stick = stick_from_probs(&vec![1.0 / k as f64; k]);
        assert!(stick.iter().all(|v| v.abs() < 1e-12), "{stick:?}");
    }
}

#[test]
fn rejects_a_uniform_top_bin() {
    let knots = KnotVector::new(vec![0.0, 10.0], true).unwrap();
    let r = PiecewiseDensity::new(knots, vec![0.5, 0.5], vec![BinFamily::Uniform; 2]);
    assert!(r.is_err());
}
