//! Independent brute-force oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use mpdqte::data::{validate_sample, MatchedSample, Observation};
use mpdqte::quantile::empirical_quantile;
use mpdqte::sieve::{build_basis, CvTarget, KnotLevels, SieveSpec};
use mpdqte::simulation::{generate, DgpSpec, Model};
use mpdqte::rng::{stream, StreamRng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn rng(seed: u64) -> StreamRng {
    stream(seed, 0)
}

pub fn model_sample(model: Model, n: usize, seed: u64) -> MatchedSample {
    generate(&DgpSpec::new(model, n), &mut rng(seed)).unwrap().sample
}

/// Pairs of consecutive units with continuous outcomes and covariates.
pub fn random_sample(n: usize, dim: usize, seed: u64) -> MatchedSample {
    let mut r = rng(seed);
    let mut raw = Vec::with_capacity(2 * n);
    for j in 0..n {
        let first_treated = r.gen_bool(0.5);
        for k in 0..2 {
            let x: Vec<f64> = (0..dim).map(|_| r.gen::<f64>()).collect();
            let y = x.iter().sum::<f64>() * 2.0 + r.gen::<f64>() * 3.0 - 1.5;
            raw.push(Observation::new(y, x, first_treated == (k == 0)).with_pair(j as u64));
        }
    }
    validate_sample(raw, true).unwrap()
}

pub fn check_loss(u: f64, tau: f64) -> f64 {
    u * (tau - if u <= 0.0 { 1.0 } else { 0.0 })
}

/// Minimizer of `sum_i w_i rho_tau(v_i - q)` over the data points, and whether
/// it is unique by a clear margin.
pub fn brute_weighted_quantile(values: &[f64], weights: &[f64], tau: f64) -> (f64, bool) {
    let obj = |q: f64| -> f64 {
        values
            .iter()
            .zip(weights)
            .map(|(&v, &w)| w * check_loss(v - q, tau))
            .sum()
    };
    let mut scored: Vec<(f64, f64)> = values.iter().map(|&q| (obj(q), q)).collect();
    scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let best = scored[0];
    let scale = weights.iter().sum::<f64>() * values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let unique = scored
        .iter()
        .filter(|s| s.1 != best.1)
        .all(|s| s.0 - best.0 > 1e-9 * scale);
    (best.1, unique)
}

/// Perturbation `(T1, T0)` computed directly from the role definitions:
/// within each pair the treated and control unit, and within each block of
/// pairs `(2k-1, 2k)` the first/second treated and control units.
pub fn gradient_perturbation(
    sample: &MatchedSample,
    tau: f64,
    q1: f64,
    q0: f64,
    eta: &[f64],
    eta_hat: &[f64],
) -> (f64, f64) {
    let obs = sample.observations();
    let pairs = sample.pairs().unwrap();
    let roles: Vec<(usize, usize)> = pairs
        .iter()
        .map(|&(u, v)| if obs[u].treated { (u, v) } else { (v, u) })
        .collect();
    let s = |i: usize, q: f64| tau - if obs[i].y <= q { 1.0 } else { 0.0 };
    let mut t1 = 0.0;
    let mut t0 = 0.0;
    for (j, &(t, c)) in roles.iter().enumerate() {
        t1 += eta[j] * s(t, q1);
        t0 += eta[j] * s(c, q0);
    }
    for (k, &e) in eta_hat.iter().enumerate() {
        let (a1, a2) = roles[2 * k];
        let (a3, a4) = roles[2 * k + 1];
        t1 += e * (s(a1, q1) - s(a3, q1));
        t0 += e * (s(a2, q0) - s(a4, q0));
    }
    (t1 / 2f64.sqrt(), t0 / 2f64.sqrt())
}

/// Minimizes `sum_i rho_tau(Y_i - b0 - A_i b1) - b' [[1,1],[1,0]] (T1, T0)'` over
/// all `(b0, b1)` with `b0` a control outcome and `b0 + b1` a treated outcome.
/// Returns `b1` per grid point, plus whether each minimizer was unique by a margin.
pub fn brute_gradient(sample: &MatchedSample, taus: &[f64], eta: &[f64], eta_hat: &[f64]) -> Vec<(f64, bool)> {
    let obs = sample.observations();
    let treated: Vec<f64> = sample.treated_outcomes();
    let control: Vec<f64> = sample.control_outcomes();
    taus.iter()
        .map(|&tau| {
            let q1 = empirical_quantile(&treated, tau).unwrap();
            let q0 = empirical_quantile(&control, tau).unwrap();
            let (t1, t0) = gradient_perturbation(sample, tau, q1, q0, eta, eta_hat);
            let mut best: Vec<(f64, f64)> = Vec::with_capacity(treated.len() * control.len());
            for &y1 in &treated {
                for &y0 in &control {
                    let (b0, b1) = (y0, y1 - y0);
                    let fit: f64 = obs
                        .iter()
                        .map(|o| check_loss(o.y - b0 - if o.treated { b1 } else { 0.0 }, tau))
                        .sum();
                    let linear = b0 * (t1 + t0) + b1 * t1;
                    best.push((fit - linear, b1));
                }
            }
            best.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let unique = best
                .iter()
                .skip(1)
                .filter(|c| c.1 != best[0].1)
                .all(|c| c.0 - best[0].0 > 1e-9);
            (best[0].1, unique)
        })
        .collect()
}

/// Leave-one-out score by explicitly refitting without each unit (SVD least squares).
pub fn loo_refit_score(sample: &MatchedSample, spec: &SieveSpec, target: CvTarget) -> (f64, f64) {
    let obs = sample.observations();
    let dim = sample.covariate_dim();
    let knots: Vec<Vec<f64>> = (0..dim)
        .map(|l| {
            let col: Vec<f64> = obs.iter().map(|o| o.x[l]).collect();
            let levels = match &spec.knots {
                KnotLevels::Shared(v) => v.clone(),
                KnotLevels::PerCovariate(v) => v[l].clone(),
            };
            levels.iter().map(|&p| empirical_quantile(&col, p).unwrap()).collect()
        })
        .collect();
    let arm = |treated: bool| -> f64 {
        let units: Vec<&Observation> = obs.iter().filter(|o| o.treated == treated).collect();
        let ys: Vec<f64> = units.iter().map(|o| o.y).collect();
        let d: Vec<f64> = match target {
            CvTarget::Quantile(tau) => {
                let q = empirical_quantile(&ys, tau).unwrap();
                ys.iter().map(|&y| if y <= q { 1.0 } else { 0.0 }).collect()
            }
            CvTarget::Mean => ys.clone(),
        };
        let rows: Vec<Vec<f64>> = units
            .iter()
            .map(|o| build_basis(&o.x, spec, &knots).unwrap())
            .collect();
        let k = rows[0].len();
        let mut total = 0.0;
        for left in 0..units.len() {
            let keep: Vec<usize> = (0..units.len()).filter(|&i| i != left).collect();
            let x = DMatrix::from_fn(keep.len(), k, |i, c| rows[keep[i]][c]);
            let y = DVector::from_iterator(keep.len(), keep.iter().map(|&i| d[i]));
            let beta = x.svd(true, true).solve(&y, 1e-13).unwrap();
            let pred: f64 = rows[left].iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            total += (d[left] - pred).powi(2);
        }
        total / units.len() as f64
    };
    (arm(true), arm(false))
}
