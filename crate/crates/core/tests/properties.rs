mod common;

use common::*;
use mpdqte::bootstrap::{Engine, Method};
use mpdqte::data::{read_csv, validate_sample, write_csv, ColumnMap};
use mpdqte::design::{assign_treatment, match_pairs, path_objective, reorder_permutation};
use mpdqte::inference::{bootstrap_se, uniform_band, wald_single};
use mpdqte::quantile::diq_estimate;
use mpdqte::simulation::{generate, DgpSpec, Model};
use proptest::prelude::*;

fn points(max_units: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_units / 2).prop_flat_map(move |half| {
        prop::collection::vec(prop::collection::vec(-10.0f64..10.0, dim), 2 * half)
    })
}

fn draws(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_is_a_perfect_matching(dim in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = 2 * (1 + (seed % 20) as usize);
        let x: Vec<Vec<f64>> = (0..m).map(|_| (0..dim).map(|_| rand::Rng::gen::<f64>(&mut r)).collect()).collect();
        let pairs = match_pairs(&x).unwrap();
        prop_assert_eq!(pairs.len(), m / 2);
        let mut seen = vec![false; m];
        for (a, b) in pairs {
            prop_assert!(a != b);
            prop_assert!(!seen[a] && !seen[b]);
            seen[a] = true;
            seen[b] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn assignment_treats_one_unit_per_pair(x in points(40, 2), seed in any::<u64>()) {
        let pairs = match_pairs(&x).unwrap();
        let a = assign_treatment(&pairs, x.len(), &mut rng(seed));
        prop_assert_eq!(a.len(), x.len());
        for (u, v) in pairs {
            prop_assert!(a[u] != a[v]);
        }
    }

    #[test]
    fn reordering_is_a_permutation_that_does_not_lengthen_the_path(mid in points(40, 2)) {
        let order = reorder_permutation(&mid);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..mid.len()).collect::<Vec<_>>());
        let identity: Vec<usize> = (0..mid.len()).collect();
        prop_assert!(path_objective(&mid, &order) <= path_objective(&mid, &identity) + 1e-12);
    }

    #[test]
    fn se_is_permutation_invariant_and_scale_equivariant(d in draws(60), c in 0.1f64..10.0, seed in any::<u64>()) {
        prop_assume!(bootstrap_se(&d).is_ok());
        let se = bootstrap_se(&d).unwrap();
        let mut shuffled = d.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng(seed));
        prop_assert_eq!(bootstrap_se(&shuffled).unwrap(), se);
        let scaled: Vec<f64> = d.iter().map(|v| v * c).collect();
        let got = bootstrap_se(&scaled).unwrap();
        prop_assert!((got - c * se).abs() <= 1e-12 * got.abs().max(1.0));
    }

    #[test]
    fn wald_statistic_is_scale_invariant(est in -5.0f64..5.0, null in -5.0f64..5.0, se in 0.01f64..5.0, c in 0.1f64..10.0) {
        let a = wald_single(est, se, null, 0.05).unwrap();
        let b = wald_single(c * est, c * se, c * null, 0.05).unwrap();
        prop_assert!((a.statistic - b.statistic).abs() <= 1e-9 * a.statistic.abs().max(1.0));
    }

    #[test]
    fn band_widens_as_alpha_shrinks(cols in prop::collection::vec(draws(200), 1..6), a1 in 0.01f64..0.2, a2 in 0.01f64..0.2) {
        let est = vec![0.0; cols.len()];
        let (small, large) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
        let tight = uniform_band(&cols, &est, large).unwrap();
        let wide = uniform_band(&cols, &est, small).unwrap();
        prop_assert!(wide.critical_value >= tight.critical_value);
        for t in 0..cols.len() {
            prop_assert!(wide.lower[t] <= tight.lower[t] && wide.upper[t] >= tight.upper[t]);
        }
    }

    #[test]
    fn band_critical_value_dominates_each_column(cols in prop::collection::vec(draws(200), 1..6)) {
        let est = vec![0.0; cols.len()];
        let band = uniform_band(&cols, &est, 0.05).unwrap();
        for (t, c) in cols.iter().enumerate() {
            let mut z: Vec<f64> = c.iter().map(|v| ((v - band.center[t]) / band.se[t]).abs()).collect();
            z.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = (0.95 * z.len() as f64).ceil() as usize;
            prop_assert!(band.critical_value >= z[k - 1]);
        }
    }

    #[test]
    fn constant_weights_reproduce_the_estimate(n in 2usize..25, seed in any::<u64>(), c in 0.1f64..10.0) {
        let sample = random_sample(n, 1, seed);
        let taus = [0.1, 0.5, 0.9];
        let diq = diq_estimate(&sample, &taus).unwrap();
        let naive = Engine::new(&sample, Method::NaiveMultiplier, &taus, None, false).unwrap();
        prop_assert_eq!(naive.multiplier_replicate(&vec![c; 2 * n]).unwrap().qte, diq.clone());
        let pair = Engine::new(&sample, Method::NaivePair, &taus, None, false).unwrap();
        prop_assert_eq!(pair.pair_replicate(&vec![c; n]).unwrap().qte, diq.clone());
        let grad = Engine::new(&sample, Method::Gradient, &taus, None, false).unwrap();
        prop_assert_eq!(grad.gradient_replicate(&vec![0.0; n], &vec![0.0; n / 2]).unwrap().qte, diq);
    }

    #[test]
    fn generated_samples_are_valid(model in 0usize..4, n in 2usize..40, seed in any::<u64>()) {
        let model = [Model::M1, Model::M2, Model::M3, Model::M4][model];
        let sim = generate(&DgpSpec::new(model, n), &mut rng(seed)).unwrap();
        prop_assert_eq!(sim.sample.n(), n);
        prop_assert_eq!(sim.sample.covariate_dim(), model.covariate_dim());
        let revalidated = validate_sample(sim.sample.observations().to_vec(), true).unwrap();
        prop_assert_eq!(revalidated.pairs(), sim.sample.pairs());
        for (o, (y1, y0)) in sim.sample.observations().iter().zip(sim.y1.iter().zip(&sim.y0)) {
            prop_assert_eq!(o.y, if o.treated { *y1 } else { *y0 });
        }
    }

    #[test]
    fn csv_roundtrip_preserves_the_sample(n in 1usize..30, dim in 1usize..4, seed in any::<u64>()) {
        let sample = random_sample(n, dim, seed);
        let schema = ColumnMap {
            outcome: "y".into(),
            treatment: "a".into(),
            covariates: (0..dim).map(|l| format!("x{l}")).collect(),
            pair: Some("pair".into()),
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, &sample, &schema).unwrap();
        let back = read_csv(buf.as_slice(), &schema).unwrap();
        prop_assert_eq!(back.observations(), sample.observations());
        prop_assert_eq!(back.pairs(), sample.pairs());
    }
}
