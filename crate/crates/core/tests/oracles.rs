mod common;

use common::*;
use mpdqte::bootstrap::{Engine, Method, SieveChoice};
use mpdqte::quantile::{diq_estimate, weighted_quantile};
use mpdqte::sieve::{cv_candidates, fit_propensity, loo_cv_score, CvTarget, SieveSpec};
use mpdqte::simulation::Model;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

const TAUS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

#[test]
fn gradient_matches_brute_force_objective() {
    let mut r = rng(100);
    let mut checked = 0;
    for draw in 0..200 {
        let n = r.gen_range(2..=30);
        let sample = random_sample(n, 1, 1000 + draw);
        let engine = Engine::new(&sample, Method::Gradient, &TAUS, None, false).unwrap();
        let eta: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let eta_hat: Vec<f64> = (0..n / 2).map(|_| r.sample(StandardNormal)).collect();
        let got = engine.gradient_replicate(&eta, &eta_hat).unwrap().qte;
        for (t, (want, unique)) in brute_gradient(&sample, &TAUS, &eta, &eta_hat).into_iter().enumerate() {
            if unique {
                assert_eq!(got[t], want, "draw {draw} n {n} tau {}", TAUS[t]);
                checked += 1;
            }
        }
    }
    assert!(checked > 950, "{checked}");
}

#[test]
fn gradient_matches_brute_force_on_model_one() {
    let sample = model_sample(Model::M1, 50, 7);
    let engine = Engine::new(&sample, Method::Gradient, &[0.5], None, false).unwrap();
    let mut r = rng(8);
    for _ in 0..20 {
        let eta: Vec<f64> = (0..50).map(|_| r.sample(StandardNormal)).collect();
        let eta_hat: Vec<f64> = (0..25).map(|_| r.sample(StandardNormal)).collect();
        let got = engine.gradient_replicate(&eta, &eta_hat).unwrap().qte;
        let (want, unique) = brute_gradient(&sample, &[0.5], &eta, &eta_hat)[0];
        assert!(unique);
        assert_eq!(got[0], want);
    }
}

#[test]
fn weighted_quantile_matches_brute_force() {
    let mut r = rng(200);
    let mut ties = 0;
    for _ in 0..500 {
        let n = r.gen_range(1..=40);
        let coarse = r.gen_bool(0.3);
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = r.sample(StandardNormal);
                if coarse {
                    (v * 2.0).round()
                } else {
                    v
                }
            })
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| r.sample(Exp1)).collect();
        let tau = r.gen_range(0.01..=0.99);
        let (want, unique) = brute_weighted_quantile(&values, &weights, tau);
        if unique {
            assert_eq!(weighted_quantile(&values, &weights, tau).unwrap(), want);
        } else {
            ties += 1;
        }
    }
    assert!(ties < 5, "{ties}");
}

#[test]
fn loo_score_matches_refit() {
    for (seed, dim) in [(1u64, 1usize), (2, 1), (3, 2), (4, 2)] {
        let n = 12 + seed as usize * 3;
        let sample = random_sample(n, dim, 300 + seed);
        for spec in cv_candidates(dim).iter().chain([&SieveSpec::power(1)]) {
            for target in [CvTarget::Quantile(0.5), CvTarget::Quantile(0.3), CvTarget::Mean] {
                let (a1, a0) = loo_cv_score(&sample, spec, target).unwrap();
                let (b1, b0) = loo_refit_score(&sample, spec, target);
                for (a, b) in [(a1, b1), (a0, b0)] {
                    assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-300), "{spec:?} {target:?}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn unit_weights_reduce_to_diq_exactly() {
    for seed in 0..20 {
        let sample = random_sample(5 + seed as usize, 1, 400 + seed);
        let n = sample.n();
        let diq = diq_estimate(&sample, &TAUS).unwrap();
        let naive = Engine::new(&sample, Method::NaiveMultiplier, &TAUS, None, false).unwrap();
        assert_eq!(naive.multiplier_replicate(&vec![1.0; 2 * n]).unwrap().qte, diq);
        let pair = Engine::new(&sample, Method::NaivePair, &TAUS, None, false).unwrap();
        assert_eq!(pair.pair_replicate(&vec![1.0; n]).unwrap().qte, diq);
        let choice = SieveChoice::Fixed(SieveSpec::intercept_only());
        let ipw = Engine::new(&sample, Method::IpwMultiplier, &TAUS, Some(&choice), false).unwrap();
        assert_eq!(ipw.ipw_replicate(&vec![1.0; 2 * n]).unwrap().qte, diq);
    }
}

#[test]
fn ipw_quantiles_satisfy_the_weighted_bracket() {
    let sample = random_sample(20, 1, 500);
    let spec = SieveSpec::default_for(1);
    let mut r = rng(501);
    let xi: Vec<f64> = (0..40).map(|_| r.sample(Exp1)).collect();
    let fit = fit_propensity(&sample, &spec, &xi).unwrap();
    let obs = sample.observations();
    let engine = Engine::new(&sample, Method::IpwMultiplier, &TAUS, Some(&SieveChoice::Fixed(spec)), false).unwrap();
    let got = engine.ipw_replicate(&xi).unwrap().qte;
    for (t, &tau) in TAUS.iter().enumerate() {
        let mut q = [0.0; 2];
        for (slot, arm) in [(0, true), (1, false)] {
            let idx: Vec<usize> = (0..obs.len()).filter(|&i| obs[i].treated == arm).collect();
            let w: Vec<f64> = idx
                .iter()
                .map(|&i| xi[i] / if arm { fit.a_hat[i] } else { 1.0 - fit.a_hat[i] })
                .collect();
            let y: Vec<f64> = idx.iter().map(|&i| obs[i].y).collect();
            let qa = weighted_quantile(&y, &w, tau).unwrap();
            let total: f64 = w.iter().sum();
            let below: f64 = y.iter().zip(&w).filter(|(v, _)| **v < qa).map(|(_, w)| w).sum();
            let at_or_below: f64 = y.iter().zip(&w).filter(|(v, _)| **v <= qa).map(|(_, w)| w).sum();
            assert!(below <= tau * total + 1e-12 && tau * total <= at_or_below + 1e-12);
            q[slot] = qa;
        }
        assert_eq!(got[t], q[0] - q[1]);
    }
}
