//! Inference from bootstrap draws: standard errors with Wald tests on top,
//! and uniform confidence bands over a grid.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bootstrap::{BootstrapDraws, Method};
use crate::data::format_real;
use crate::error::{Error, Result};
use crate::quantile::{order_index, quantile_of_sorted, sorted};

/// Fewest draws for which the 2.5% and 97.5% empirical quantiles are distinct order statistics.
pub const MIN_DRAWS: usize = 40;

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// `C(0.975) - C(0.025)`.
pub fn se_denominator() -> f64 {
    normal_quantile(0.975) - normal_quantile(0.025)
}

/// Interquantile standard error `(Q(0.975) - Q(0.025)) / (C(0.975) - C(0.025))`.
pub fn bootstrap_se(draws: &[f64]) -> Result<f64> {
    if draws.len() < MIN_DRAWS {
        return Err(Error::TooFewDraws {
            got: draws.len(),
            needed: MIN_DRAWS,
        });
    }
    let s = sorted(draws);
    Ok((quantile_of_sorted(&s, 0.975) - quantile_of_sorted(&s, 0.025)) / se_denominator())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub reject: bool,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Two-sided test of `estimate = null_value`, rejecting when `|t| >= C(1 - alpha/2)`.
pub fn wald_single(estimate: f64, se: f64, null_value: f64, alpha: f64) -> Result<WaldTest> {
    check_alpha(alpha)?;
    if !(se > 0.0) {
        return Err(Error::ZeroSe);
    }
    let statistic = (estimate - null_value) / se;
    Ok(WaldTest {
        statistic,
        reject: statistic.abs() >= normal_quantile(1.0 - alpha / 2.0),
    })
}

/// `estimate -/+ C(1 - alpha/2) se`.
pub fn confidence_interval(estimate: f64, se: f64, alpha: f64) -> (f64, f64) {
    let c = normal_quantile(1.0 - alpha / 2.0);
    (estimate - c * se, estimate + c * se)
}

/// Test of `q(tau1) - q(tau2) = null_value` with the SE of the per-replicate differences.
pub fn wald_difference(
    draws_tau1: &[f64],
    draws_tau2: &[f64],
    est_tau1: f64,
    est_tau2: f64,
    null_value: f64,
    alpha: f64,
) -> Result<WaldTest> {
    if draws_tau1.len() != draws_tau2.len() {
        return Err(Error::Config(format!(
            "draw vectors differ in length: {} vs {}",
            draws_tau1.len(),
            draws_tau2.len()
        )));
    }
    let diff: Vec<f64> = draws_tau1.iter().zip(draws_tau2).map(|(a, b)| a - b).collect();
    let se = bootstrap_se(&diff)?;
    wald_single(est_tau1 - est_tau2, se, null_value, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBand {
    pub se: Vec<f64>,
    /// Midpoint of the 2.5% and 97.5% draw quantiles of each column.
    pub center: Vec<f64>,
    pub critical_value: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl UniformBand {
    /// Whether `null` leaves the band at any grid point.
    pub fn rejects(&self, null: &[f64]) -> bool {
        null.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .any(|(&v, (&lo, &hi))| v < lo || v > hi)
    }
}

/// Uniform band over the grid from the draw columns (one column per grid point).
pub fn uniform_band(columns: &[Vec<f64>], estimates: &[f64], alpha: f64) -> Result<UniformBand> {
    check_alpha(alpha)?;
    if columns.is_empty() || columns.len() != estimates.len() {
        return Err(Error::Config(format!(
            "{} draw columns for {} estimates",
            columns.len(),
            estimates.len()
        )));
    }
    let b = columns[0].len();
    if columns.iter().any(|c| c.len() != b) {
        return Err(Error::Config("draw columns differ in length".into()));
    }
    if b < MIN_DRAWS {
        return Err(Error::TooFewDraws {
            got: b,
            needed: MIN_DRAWS,
        });
    }
    let denom = se_denominator();
    let mut se = Vec::with_capacity(columns.len());
    let mut center = Vec::with_capacity(columns.len());
    for c in columns {
        let s = sorted(c);
        let (lo, hi) = (quantile_of_sorted(&s, 0.025), quantile_of_sorted(&s, 0.975));
        let sigma = (hi - lo) / denom;
        if !(sigma > 0.0) {
            return Err(Error::ZeroSe);
        }
        se.push(sigma);
        center.push(0.5 * (hi + lo));
    }
    let sup: Vec<f64> = (0..b)
        .map(|r| {
            columns
                .iter()
                .zip(se.iter().zip(&center))
                .map(|(c, (s, m))| ((c[r] - m) / s).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let sup = sorted(&sup);
    let critical_value = sup[order_index(b, 1.0 - alpha) - 1];
    let lower = estimates.iter().zip(&se).map(|(e, s)| e - critical_value * s).collect();
    let upper = estimates.iter().zip(&se).map(|(e, s)| e + critical_value * s).collect();
    Ok(UniformBand {
        se,
        center,
        critical_value,
        lower,
        upper,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub band_lower: f64,
    pub band_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteRow {
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub hypothesis: String,
    /// `None` when the test is degenerate (zero standard error).
    pub statistic: Option<f64>,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub method: Method,
    pub alpha: f64,
    pub reps: usize,
    pub seed: u64,
    pub rows: Vec<TauRow>,
    pub critical_value: Option<f64>,
    pub ate: Option<AteRow>,
    pub tests: Vec<TestRecord>,
}

impl InferenceReport {
    /// Pointwise intervals and the uniform band, plus zero-effect tests.
    pub fn build(
        draws: &BootstrapDraws,
        estimates: &[f64],
        ate_estimate: Option<f64>,
        alpha: f64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let columns = draws.columns();
        let mut rows = Vec::with_capacity(columns.len());
        let mut tests = Vec::new();
        let mut critical_value = None;
        if !columns.is_empty() {
            let band = uniform_band(&columns, estimates, alpha)?;
            for (t, &tau) in draws.taus.iter().enumerate() {
                let se = band.se[t];
                let (ci_lower, ci_upper) = confidence_interval(estimates[t], se, alpha);
                let w = wald_single(estimates[t], se, 0.0, alpha)?;
                tests.push(TestRecord {
                    hypothesis: format!("qte({tau}) = 0"),
                    statistic: Some(w.statistic),
                    reject: w.reject,
                });
                rows.push(TauRow {
                    tau,
                    estimate: estimates[t],
                    se,
                    ci_lower,
                    ci_upper,
                    band_lower: band.lower[t],
                    band_upper: band.upper[t],
                });
            }
            let last = columns.len() - 1;
            if last > 0 {
                let hypothesis = format!("qte({}) - qte({}) = 0", draws.taus[0], draws.taus[last]);
                match wald_difference(&columns[0], &columns[last], estimates[0], estimates[last], 0.0, alpha) {
                    Ok(w) => tests.push(TestRecord {
                        hypothesis,
                        statistic: Some(w.statistic),
                        reject: w.reject,
                    }),
                    Err(Error::ZeroSe) => tests.push(TestRecord {
                        hypothesis,
                        statistic: None,
                        reject: false,
                    }),
                    Err(e) => return Err(e),
                }
            }
            let sup = estimates
                .iter()
                .zip(&band.se)
                .map(|(e, s)| (e / s).abs())
                .fold(0.0, f64::max);
            tests.push(TestRecord {
                hypothesis: "qte(tau) = 0 for all tau".into(),
                statistic: Some(sup),
                reject: band.rejects(&vec![0.0; estimates.len()]),
            });
            critical_value = Some(band.critical_value);
        }
        let ate = match (ate_estimate, &draws.ate) {
            (Some(est), Some(d)) => {
                let se = bootstrap_se(d)?;
                let (ci_lower, ci_upper) = confidence_interval(est, se, alpha);
                let w = wald_single(est, se, 0.0, alpha)?;
                tests.push(TestRecord {
                    hypothesis: "ate = 0".into(),
                    statistic: Some(w.statistic),
                    reject: w.reject,
                });
                Some(AteRow {
                    estimate: est,
                    se,
                    ci_lower,
                    ci_upper,
                })
            }
            _ => None,
        };
        Ok(Self {
            method: draws.method,
            alpha,
            reps: draws.reps(),
            seed: draws.seed,
            rows,
            critical_value,
            ate,
            tests,
        })
    }

    /// Flat table, one row per grid point plus an `ate` row when present.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["tau", "estimate", "se", "ci_lo", "ci_hi", "band_lo", "band_hi"])?;
        for r in &self.rows {
            w.write_record([
                format_real(r.tau),
                format_real(r.estimate),
                format_real(r.se),
                format_real(r.ci_lower),
                format_real(r.ci_upper),
                format_real(r.band_lower),
                format_real(r.band_upper),
            ])?;
        }
        if let Some(a) = &self.ate {
            w.write_record([
                "ate".to_string(),
                format_real(a.estimate),
                format_real(a.se),
                format_real(a.ci_lower),
                format_real(a.ci_upper),
                String::new(),
                String::new(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
