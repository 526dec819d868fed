//! Matching units into pairs, assigning treatment within pairs, ordering
//! pairs so that neighbours are close, and balance diagnostics.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pair_roles, MatchedSample};
use crate::error::{Error, Result};

/// Default ratio of adjacent-pair to within-pair distance above which
/// [`diagnostics`] raises its warning flag.
pub const DEFAULT_WARNING_FACTOR: f64 = 10.0;

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pairs `2n` units on their covariates.
///
/// Scalar covariates are sorted and consecutive units paired. For vectors the
/// closest unmatched couple is paired repeatedly (greedy non-bipartite
/// matching on Euclidean distance); ties go to the lowest indices.
pub fn match_pairs(covariates: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let m = covariates.len();
    if m == 0 {
        return Err(Error::EmptyInput);
    }
    if m % 2 == 1 {
        return Err(Error::OddCount(m));
    }
    let dim = covariates[0].len();
    if dim == 0 || covariates.iter().any(|x| x.len() != dim) {
        return Err(Error::Config("covariate vectors must share a nonzero length".into()));
    }
    if dim == 1 {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            covariates[a][0]
                .partial_cmp(&covariates[b][0])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        return Ok(order.chunks(2).map(|c| (c[0], c[1])).collect());
    }

    let mut edges = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            edges.push((euclidean(&covariates[i], &covariates[j]), i, j));
        }
    }
    edges.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut matched = vec![false; m];
    let mut pairs = Vec::with_capacity(m / 2);
    for (_, i, j) in edges {
        if !matched[i] && !matched[j] {
            matched[i] = true;
            matched[j] = true;
            pairs.push((i, j));
            if pairs.len() == m / 2 {
                break;
            }
        }
    }
    pairs.sort();
    Ok(pairs)
}

/// Treats one unit per pair by a fair coin; returns the treatment flag of
/// every unit (indices `0..n_units`).
pub fn assign_treatment<R: Rng + ?Sized>(
    pairing: &[(usize, usize)],
    n_units: usize,
    rng: &mut R,
) -> Vec<bool> {
    let mut treated = vec![false; n_units];
    for &(u, v) in pairing {
        if rng.gen_bool(0.5) {
            treated[u] = true;
        } else {
            treated[v] = true;
        }
    }
    treated
}

/// Midpoint of each pair's covariates, in the sample's pair order.
pub fn pair_midpoints(sample: &MatchedSample) -> Result<Vec<Vec<f64>>> {
    let obs = sample.observations();
    Ok(sample
        .require_pairs()?
        .iter()
        .map(|&(u, v)| {
            obs[u]
                .x
                .iter()
                .zip(&obs[v].x)
                .map(|(a, b)| 0.5 * (a + b))
                .collect()
        })
        .collect())
}

/// `(1/n) sum_j |m_order[j] - m_order[j-1]|` over consecutive pairs.
pub fn path_objective(midpoints: &[Vec<f64>], order: &[usize]) -> f64 {
    if order.is_empty() {
        return 0.0;
    }
    order
        .windows(2)
        .map(|w| euclidean(&midpoints[w[0]], &midpoints[w[1]]))
        .sum::<f64>()
        / order.len() as f64
}

/// Pair order making consecutive pair midpoints close.
///
/// Scalar midpoints are sorted, which minimizes the path exactly. Otherwise a
/// nearest-neighbour path starts at the lexicographically smallest midpoint
/// and is improved by 2-opt segment reversals; the input order is kept if it
/// is already shorter.
pub fn reorder_permutation(midpoints: &[Vec<f64>]) -> Vec<usize> {
    let n = midpoints.len();
    let identity: Vec<usize> = (0..n).collect();
    if n <= 2 {
        return identity;
    }
    let lex = |a: &usize, b: &usize| {
        midpoints[*a]
            .iter()
            .zip(&midpoints[*b])
            .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if midpoints[0].len() == 1 {
        let mut order = identity;
        order.sort_by(lex);
        return order;
    }

    let start = (0..n).min_by(lex).unwrap();
    let mut used = vec![false; n];
    let mut order = Vec::with_capacity(n);
    used[start] = true;
    order.push(start);
    for _ in 1..n {
        let last = *order.last().unwrap();
        let next = (0..n)
            .filter(|&j| !used[j])
            .min_by(|&a, &b| {
                euclidean(&midpoints[last], &midpoints[a])
                    .partial_cmp(&euclidean(&midpoints[last], &midpoints[b]))
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            })
            .unwrap();
        used[next] = true;
        order.push(next);
    }
    two_opt(midpoints, &mut order);

    if path_objective(midpoints, &order) <= path_objective(midpoints, &identity) {
        order
    } else {
        identity
    }
}

/// 2-opt on an open path: reverse `order[i..=j]` whenever that shortens it.
fn two_opt(midpoints: &[Vec<f64>], order: &mut [usize]) {
    let n = order.len();
    let d = |a: usize, b: usize| euclidean(&midpoints[a], &midpoints[b]);
    // bounded number of sweeps; each accepted move strictly shortens the path
    for _ in 0..50 {
        let mut improved = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let before_left = if i > 0 { d(order[i - 1], order[i]) } else { 0.0 };
                let after_left = if i > 0 { d(order[i - 1], order[j]) } else { 0.0 };
                let before_right = if j + 1 < n { d(order[j], order[j + 1]) } else { 0.0 };
                let after_right = if j + 1 < n { d(order[i], order[j + 1]) } else { 0.0 };
                if after_left + after_right < before_left + before_right - 1e-12 {
                    order[i..=j].reverse();
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Re-indexes the pairs by [`reorder_permutation`]. Observations are untouched.
pub fn reorder_pairs(sample: &MatchedSample) -> Result<MatchedSample> {
    let pairs = sample.require_pairs()?;
    let mids = pair_midpoints(sample)?;
    let order = reorder_permutation(&mids);
    Ok(sample.with_pair_order(order.iter().map(|&j| pairs[j]).collect()))
}

/// Average covariate distances within pairs and across adjacent pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignDiagnostics {
    /// `(1/n) sum_j |X_(j,1) - X_(j,0)|^r` for `r = 1, 2`.
    pub within_pair_dist: [f64; 2],
    /// Mean over blocks of adjacent pairs of the average `|X - X'|^r` between
    /// a unit of the first pair and a unit of the second (four combinations).
    pub adjacent_pair_dist: [f64; 2],
    pub warning: bool,
}

pub fn diagnostics(sample: &MatchedSample, warning_factor: f64) -> Result<DesignDiagnostics> {
    let roles = pair_roles(sample)?;
    let obs = sample.observations();
    let x = |i: usize| obs[i].x.as_slice();

    let mut within = [0.0; 2];
    for (&t, &c) in roles.treated.iter().zip(&roles.control) {
        let d = euclidean(x(t), x(c));
        within[0] += d;
        within[1] += d * d;
    }
    let n = roles.treated.len() as f64;
    within.iter_mut().for_each(|v| *v /= n);

    let mut adjacent = [0.0; 2];
    if !roles.blocks.is_empty() {
        for block in &roles.blocks {
            for &first in &block[0..2] {
                for &second in &block[2..4] {
                    let d = euclidean(x(first), x(second));
                    adjacent[0] += d / 4.0;
                    adjacent[1] += d * d / 4.0;
                }
            }
        }
        let k = roles.blocks.len() as f64;
        adjacent.iter_mut().for_each(|v| *v /= k);
    }

    Ok(DesignDiagnostics {
        within_pair_dist: within,
        adjacent_pair_dist: adjacent,
        warning: adjacent[0] > warning_factor * within[0],
    })
}
