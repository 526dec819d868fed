//! Empirical and weighted quantiles as minimizers of the check loss, and the
//! difference-in-quantiles / difference-in-means point estimators.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::MatchedSample;
use crate::error::{Error, Result};

/// Lowest and highest admissible quantile index.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 0.99;

/// Relative slack used when comparing cumulative weights against `tau * total`.
const BRACKET_TOL: f64 = 1e-12;

/// Asymmetric absolute loss `u (tau - 1{u <= 0})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckLoss {
    tau: f64,
}

impl CheckLoss {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self { tau })
        } else {
            Err(Error::InvalidTau(tau))
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn loss(&self, u: f64) -> f64 {
        if u <= 0.0 {
            u * (self.tau - 1.0)
        } else {
            u * self.tau
        }
    }

    /// `sum_i w_i rho(y_i - q)`.
    pub fn objective(&self, values: &[f64], weights: &[f64], q: f64) -> f64 {
        values
            .iter()
            .zip(weights)
            .map(|(&y, &w)| w * self.loss(y - q))
            .sum()
    }
}

/// Strictly increasing set of quantile indexes inside `[0.01, 0.99]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    taus: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::InvalidGrid("no quantile indexes".into()));
        }
        for &t in &taus {
            if !(TAU_MIN..=TAU_MAX).contains(&t) {
                return Err(Error::InvalidTau(t));
            }
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid(
                "quantile indexes must be strictly increasing".into(),
            ));
        }
        Ok(Self { taus })
    }

    /// `lo, lo + step, ...` up to `hi` inclusive (with a small tolerance on the end point).
    pub fn from_range(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || hi < lo {
            return Err(Error::InvalidGrid(format!("bad range {lo}:{hi}:{step}")));
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        // rounding to 1e-10 keeps decimal grids such as 0.25:0.75:0.02 clean
        let taus = (0..count)
            .map(|i| ((lo + i as f64 * step) * 1e10).round() / 1e10)
            .collect();
        Self::new(taus)
    }

    /// The uniform-inference grid of the simulation study:
    /// {0.25, 0.27, ..., 0.49, 0.5, 0.51, ..., 0.75}.
    pub fn simulation_band_grid() -> Self {
        let mut taus: Vec<f64> = (0..13).map(|i| (25 + 2 * i) as f64 / 100.0).collect();
        taus.push(0.5);
        taus.extend((0..13).map(|i| (51 + 2 * i) as f64 / 100.0));
        Self { taus }
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Position of `tau` in the grid, compared up to 1e-9.
    pub fn position(&self, tau: f64) -> Option<usize> {
        self.taus.iter().position(|&t| (t - tau).abs() < 1e-9)
    }
}

/// `ceil(x)`, except that values within rounding noise of an integer snap to it.
pub(crate) fn snapped_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// One-based order-statistic index `ceil(n tau)`, clamped to `[1, n]`.
pub fn order_index(n: usize, tau: f64) -> usize {
    (snapped_ceil(n as f64 * tau).max(1.0) as usize).min(n)
}

fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).expect("NaN in quantile input")
}

pub(crate) fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(cmp_f64);
    v
}

/// Order statistic `Y_(ceil(n tau))`, the lower end of the check-loss argmin
/// when `n tau` is an integer.
pub fn empirical_quantile(values: &[f64], tau: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    CheckLoss::new(tau)?;
    let s = sorted(values);
    Ok(quantile_of_sorted(&s, tau))
}

/// Same convention on data that is already sorted ascending.
pub fn quantile_of_sorted(sorted: &[f64], tau: f64) -> f64 {
    sorted[order_index(sorted.len(), tau) - 1]
}

/// Weighted `tau`-quantile solving the sub-gradient conditions
/// `tau W - w_h <= sum_i w_i 1{y_i < y_h} <= tau W`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], tau: f64) -> Result<f64> {
    weighted_quantile_index(values, weights, tau).map(|i| values[i])
}

/// Index into `values` of the weighted quantile; among tied values the smallest index.
pub fn weighted_quantile_index(values: &[f64], weights: &[f64], tau: f64) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    CheckLoss::new(tau)?;
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config("weights must be finite and nonnegative".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| cmp_f64(&values[a], &values[b]).then(a.cmp(&b)));
    let sorted_values: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let arm = SortedArm::new(sorted_values);
    let w: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
    let pos = arm.weighted_position(&w, tau)?;
    Ok(order[pos])
}

/// One arm's outcomes sorted once, with duplicate runs marked, so that many
/// weighted quantiles can be taken with different weight vectors cheaply.
#[derive(Debug, Clone)]
pub struct SortedArm {
    values: Vec<f64>,
    /// Exclusive end position of each run of equal values.
    run_ends: Vec<usize>,
}

impl SortedArm {
    pub fn new(sorted_values: Vec<f64>) -> Self {
        debug_assert!(sorted_values.windows(2).all(|w| w[0] <= w[1]));
        let mut run_ends = Vec::new();
        for i in 1..=sorted_values.len() {
            if i == sorted_values.len() || sorted_values[i] != sorted_values[i - 1] {
                run_ends.push(i);
            }
        }
        Self {
            values: sorted_values,
            run_ends,
        }
    }

    pub fn from_unsorted(values: &[f64]) -> Self {
        Self::new(sorted(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Unweighted quantile, `Y_(ceil(n tau))`.
    pub fn quantile(&self, tau: f64) -> f64 {
        quantile_of_sorted(&self.values, tau)
    }

    /// Order statistic with one-based index `h`.
    pub fn order_stat(&self, h: usize) -> f64 {
        self.values[h - 1]
    }

    /// Cumulative weight at the end of each run, for `weights` given in sorted order.
    pub fn run_cumulative(&self, weights: &[f64]) -> Result<Vec<f64>> {
        debug_assert_eq!(weights.len(), self.values.len());
        let mut out = Vec::with_capacity(self.run_ends.len());
        let mut acc = 0.0;
        let mut start = 0;
        for &end in &self.run_ends {
            acc += weights[start..end].iter().sum::<f64>();
            out.push(acc);
            start = end;
        }
        if !(acc > 0.0) {
            return Err(Error::ZeroTotalWeight);
        }
        Ok(out)
    }

    /// First run whose cumulative weight reaches `tau W`; returns the sorted
    /// position of its first element.
    fn position_from_cumulative(&self, cumulative: &[f64], tau: f64) -> usize {
        let total = *cumulative.last().unwrap();
        let target = tau * total - BRACKET_TOL * total;
        let run = cumulative
            .partition_point(|&c| c < target)
            .min(cumulative.len() - 1);
        if run == 0 {
            0
        } else {
            self.run_ends[run - 1]
        }
    }

    fn weighted_position(&self, weights: &[f64], tau: f64) -> Result<usize> {
        let c = self.run_cumulative(weights)?;
        Ok(self.position_from_cumulative(&c, tau))
    }

    /// Weighted quantiles at every `tau` for one weight vector (in sorted order).
    pub fn weighted_quantiles(&self, weights: &[f64], taus: &[f64], out: &mut [f64]) -> Result<()> {
        let c = self.run_cumulative(weights)?;
        for (o, &t) in out.iter_mut().zip(taus) {
            *o = self.values[self.position_from_cumulative(&c, t)];
        }
        Ok(())
    }
}

/// Treated-minus-control empirical quantile at every grid point.
pub fn diq_estimate(sample: &MatchedSample, taus: &[f64]) -> Result<Vec<f64>> {
    Ok(arm_quantiles(sample, taus)?
        .into_iter()
        .map(|(q1, q0)| q1 - q0)
        .collect())
}

/// Per-arm empirical quantiles `(q1, q0)` at every grid point.
pub fn arm_quantiles(sample: &MatchedSample, taus: &[f64]) -> Result<Vec<(f64, f64)>> {
    let t = SortedArm::from_unsorted(&sample.treated_outcomes());
    let c = SortedArm::from_unsorted(&sample.control_outcomes());
    if t.is_empty() || c.is_empty() {
        return Err(Error::EmptyInput);
    }
    taus.iter()
        .map(|&tau| {
            CheckLoss::new(tau)?;
            Ok((t.quantile(tau), c.quantile(tau)))
        })
        .collect()
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Difference in means.
pub fn ate_estimate(sample: &MatchedSample) -> f64 {
    mean(&sample.treated_outcomes()) - mean(&sample.control_outcomes())
}
