//! Data-generating processes, simulated truths, asymptotic variance kernels
//! and Monte Carlo rejection studies.
//!
//! Potential outcomes follow `Y(a) = m_a(X) + sigma_a(X) eps_a` with standard
//! normal errors. Models 1 and 2 have a scalar uniform covariate; models 3
//! and 4 use a Gaussian copula on two covariates.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::bootstrap::{run_bootstrap, BootstrapConfig, Method, SieveChoice};
use crate::data::{format_real, validate_sample, MatchedSample, Observation};
use crate::design::{assign_treatment, match_pairs};
use crate::error::{Error, Result};
use crate::inference::{bootstrap_se, uniform_band, wald_difference, wald_single};
use crate::quantile::{ate_estimate, diq_estimate, quantile_of_sorted, QuantileGrid};
use crate::rng::{derive_seed, stream};
use crate::sieve::SieveSpec;
use gkquad::single::Integrator;
use gkquad::Tolerance;

/// Number of draws per arm behind [`true_qte`].
pub const TRUTH_DRAWS: usize = 1_000_000;
/// Seed of the default truth simulation.
pub const TRUTH_SEED: u64 = 0x5eed_7a07;
/// Absolute tolerance of the variance-kernel quadrature.
pub const QUADRATURE_TOL: f64 = 1e-6;
/// Gaussian integrals are truncated to `[-RANGE, RANGE]`.
const RANGE: f64 = 8.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    M1,
    M2,
    M3,
    M4,
}

impl Model {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "m1" | "model1" => Some(Model::M1),
            "2" | "m2" | "model2" => Some(Model::M2),
            "3" | "m3" | "model3" => Some(Model::M3),
            "4" | "m4" | "model4" => Some(Model::M4),
            _ => None,
        }
    }

    pub fn covariate_dim(self) -> usize {
        match self {
            Model::M1 | Model::M2 => 1,
            Model::M3 | Model::M4 => 2,
        }
    }
}

impl std::fmt::Display for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Model::M1 => "m1",
            Model::M2 => "m2",
            Model::M3 => "m3",
            Model::M4 => "m4",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub model: Model,
    /// Number of pairs `n`; the sample has `2n` units.
    pub n_pairs: usize,
    pub sigma1: f64,
    pub gamma: [f64; 2],
    pub rho: f64,
    /// Sets `m_1 = m_0`, removing covariate-driven effect heterogeneity.
    pub homogeneous: bool,
}

impl DgpSpec {
    pub fn new(model: Model, n_pairs: usize) -> Self {
        let (sigma1, gamma, rho) = match model {
            Model::M1 | Model::M2 => (1.0, [1.0, 1.0], 0.0),
            Model::M3 => (1.0, [1.0, 1.0], 0.2),
            Model::M4 => (2.0, [1.0, 4.0], 0.7),
        };
        Self {
            model,
            n_pairs,
            sigma1,
            gamma,
            rho,
            homogeneous: false,
        }
    }

    pub fn homogeneous(mut self) -> Self {
        self.homogeneous = true;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.n_pairs < 2 {
            return Err(Error::Config(format!("at least two pairs needed, got {}", self.n_pairs)));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if !(self.sigma1 > 0.0) {
            return Err(Error::Config(format!("sigma1 must be positive, got {}", self.sigma1)));
        }
        Ok(())
    }

    /// Draws the latent covariate: `X` for models 1 and 2, `V` for models 3 and 4.
    fn draw_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        match self.model {
            Model::M1 | Model::M2 => [rng.gen::<f64>(), 0.0],
            Model::M3 | Model::M4 => {
                let v1: f64 = rng.sample(StandardNormal);
                let z: f64 = rng.sample(StandardNormal);
                [v1, self.rho * v1 + (1.0 - self.rho * self.rho).sqrt() * z]
            }
        }
    }

    /// Observed covariate vector for a latent draw.
    fn covariate(&self, latent: [f64; 2]) -> Vec<f64> {
        match self.model {
            Model::M1 | Model::M2 => vec![latent[0]],
            Model::M3 | Model::M4 => vec![phi_cdf(latent[0]), phi_cdf(latent[1])],
        }
    }

    /// `(m_a, sigma_a)` at a latent covariate value.
    fn components(&self, treated: bool, latent: [f64; 2]) -> (f64, f64) {
        match self.model {
            Model::M1 | Model::M2 => {
                let x = latent[0];
                let m = if treated && !self.homogeneous {
                    10.0 * (x * x - 1.0 / 3.0)
                } else {
                    0.0
                };
                let base = if self.model == Model::M2 { 1.0 + x * x } else { 1.0 };
                (m, if treated { base * self.sigma1 } else { base })
            }
            Model::M3 | Model::M4 => {
                let [v1, v2] = latent;
                let m0 = self.gamma[0] * phi_cdf(v1) + self.gamma[1] * phi_cdf(v2) - 1.0;
                let m = if treated && !self.homogeneous {
                    m0 + 10.0 * (v1 * v2 - self.rho)
                } else {
                    m0
                };
                (m, if treated { self.sigma1 } else { 1.0 })
            }
        }
    }

    fn potential_outcomes<R: Rng + ?Sized>(&self, latent: [f64; 2], rng: &mut R) -> (f64, f64) {
        let (m0, s0) = self.components(false, latent);
        let (m1, s1) = self.components(true, latent);
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        (m0 + s0 * e0, m1 + s1 * e1)
    }

    /// `E[g(latent)]` by (nested) adaptive Gauss-Kronrod quadrature.
    fn expect<F: Fn([f64; 2]) -> f64>(&self, g: F, tol: f64) -> Result<f64> {
        match self.model {
            Model::M1 | Model::M2 => integrate(|x| g([x, 0.0]), 0.0, 1.0, tol),
            Model::M3 | Model::M4 => {
                let c = (1.0 - self.rho * self.rho).sqrt();
                let inner_tol = tol / (2.0 * RANGE);
                let failure = std::cell::Cell::new(None);
                let outer = integrate(
                    |v1| {
                        let inner = integrate(
                            |z| phi_pdf(z) * g([v1, self.rho * v1 + c * z]),
                            -RANGE,
                            RANGE,
                            inner_tol,
                        );
                        match inner {
                            Ok(v) => phi_pdf(v1) * v,
                            Err(e) => {
                                failure.set(Some(e.to_string()));
                                f64::NAN
                            }
                        }
                    },
                    -RANGE,
                    RANGE,
                    tol,
                );
                match failure.into_inner() {
                    Some(msg) => Err(Error::QuadratureFailure(msg)),
                    None => outer,
                }
            }
        }
    }

    /// Marginal cdf of `Y(a)` at `y`.
    pub fn outcome_cdf(&self, treated: bool, y: f64) -> Result<f64> {
        self.expect(
            |l| {
                let (m, s) = self.components(treated, l);
                phi_cdf((y - m) / s)
            },
            1e-10,
        )
    }

    /// Marginal density of `Y(a)` at `y`.
    pub fn outcome_density(&self, treated: bool, y: f64) -> Result<f64> {
        self.expect(
            |l| {
                let (m, s) = self.components(treated, l);
                phi_pdf((y - m) / s) / s
            },
            1e-10,
        )
    }

    /// `tau`-quantile of `Y(a)`: Newton steps safeguarded by bisection.
    pub fn outcome_quantile(&self, treated: bool, tau: f64) -> Result<f64> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidTau(tau));
        }
        let (mut lo, mut hi) = (-1.0, 1.0);
        while self.outcome_cdf(treated, lo)? > tau {
            lo *= 2.0;
        }
        while self.outcome_cdf(treated, hi)? < tau {
            hi *= 2.0;
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..100 {
            let gap = self.outcome_cdf(treated, x)? - tau;
            if gap < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            if gap.abs() < 1e-13 || hi - lo <= 1e-12 * x.abs().max(1.0) {
                break;
            }
            let step = x - gap / self.outcome_density(treated, x)?;
            x = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        }
        Ok(x)
    }
}

fn phi_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

fn phi_pdf(x: f64) -> f64 {
    Normal::standard().pdf(x)
}

fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    let v = Integrator::new(|x: f64| f(x))
        .tolerance(Tolerance::Absolute(tol))
        .max_iters(1000)
        .run(a..b)
        .estimate()
        .map_err(|e| Error::QuadratureFailure(format!("{e} on [{a}, {b}]")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::QuadratureFailure(format!("non-finite integral on [{a}, {b}]")))
    }
}

/// A simulated matched-pairs sample together with both potential outcomes of every unit.
#[derive(Debug, Clone)]
pub struct SimulatedSample {
    pub sample: MatchedSample,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Draws `2n` units, forms pairs (sorting for a scalar covariate, greedy
/// matching otherwise) and assigns treatment by a fair coin within each pair.
pub fn generate<R: Rng + ?Sized>(spec: &DgpSpec, rng: &mut R) -> Result<SimulatedSample> {
    spec.check()?;
    let units = 2 * spec.n_pairs;
    let mut covariates = Vec::with_capacity(units);
    let mut y0 = Vec::with_capacity(units);
    let mut y1 = Vec::with_capacity(units);
    for _ in 0..units {
        let latent = spec.draw_latent(rng);
        let (a, b) = spec.potential_outcomes(latent, rng);
        covariates.push(spec.covariate(latent));
        y0.push(a);
        y1.push(b);
    }
    let pairs = match_pairs(&covariates)?;
    let treated = assign_treatment(&pairs, units, rng);
    let mut pair_of = vec![0u64; units];
    for (j, &(u, v)) in pairs.iter().enumerate() {
        pair_of[u] = j as u64;
        pair_of[v] = j as u64;
    }
    let raw = (0..units)
        .map(|i| {
            let y = if treated[i] { y1[i] } else { y0[i] };
            Observation::new(y, covariates[i].clone(), treated[i]).with_pair(pair_of[i])
        })
        .collect();
    Ok(SimulatedSample {
        sample: validate_sample(raw, true)?,
        y0,
        y1,
    })
}

fn truth_cache() -> &'static Mutex<HashMap<String, Vec<f64>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Vec<f64>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Quantile treatment effect from [`TRUTH_DRAWS`] simulated draws of each potential outcome.
pub fn true_qte(spec: &DgpSpec, taus: &[f64]) -> Result<Vec<f64>> {
    true_qte_with(spec, taus, TRUTH_DRAWS, TRUTH_SEED)
}

/// [`true_qte`] with an explicit draw count and seed; results are cached.
pub fn true_qte_with(spec: &DgpSpec, taus: &[f64], draws: usize, seed: u64) -> Result<Vec<f64>> {
    spec.check()?;
    QuantileGrid::new(taus.to_vec())?;
    let key = format!(
        "{}|{:?}|{:?}|{:?}|{}|{taus:?}|{draws}|{seed}",
        spec.model, spec.sigma1, spec.gamma, spec.rho, spec.homogeneous
    );
    if let Some(v) = truth_cache().lock().unwrap().get(&key) {
        return Ok(v.clone());
    }
    let mut rng = stream(seed, 0);
    let mut y0 = Vec::with_capacity(draws);
    let mut y1 = Vec::with_capacity(draws);
    for _ in 0..draws {
        let latent = spec.draw_latent(&mut rng);
        let (a, b) = spec.potential_outcomes(latent, &mut rng);
        y0.push(a);
        y1.push(b);
    }
    y0.par_sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    y1.par_sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let qte: Vec<f64> = taus
        .iter()
        .map(|&t| quantile_of_sorted(&y1, t) - quantile_of_sorted(&y0, t))
        .collect();
    truth_cache().lock().unwrap().insert(key, qte.clone());
    Ok(qte)
}

/// The average treatment effect of every model.
pub fn true_ate(_spec: &DgpSpec) -> f64 {
    0.0
}

/// Asymptotic variance kernels of the quantile effect estimator at `(tau, tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceKernel {
    /// Under matched pairs.
    pub sigma: f64,
    /// Under independent assignment with the same marginal sample sizes.
    pub sigma_dagger: f64,
}

/// `Sigma(tau, tau)` and `Sigma_dagger(tau, tau)` by quadrature, with
/// `m_{a,tau}(x) = tau - F_a(q_a(tau) | x)`.
pub fn analytic_variance(spec: &DgpSpec, tau: f64) -> Result<VarianceKernel> {
    spec.check()?;
    let q1 = spec.outcome_quantile(true, tau)?;
    let q0 = spec.outcome_quantile(false, tau)?;
    let f1 = spec.outcome_density(true, q1)?;
    let f0 = spec.outcome_density(false, q0)?;
    let m_tau = |treated: bool, q: f64, l: [f64; 2]| {
        let (m, s) = spec.components(treated, l);
        tau - phi_cdf((q - m) / s)
    };
    let e_m1 = spec.expect(|l| m_tau(true, q1, l).powi(2), QUADRATURE_TOL * 1e-3)?;
    let e_m0 = spec.expect(|l| m_tau(false, q0, l).powi(2), QUADRATURE_TOL * 1e-3)?;
    let e_diff = spec.expect(
        |l| (m_tau(true, q1, l) / f1 - m_tau(false, q0, l) / f0).powi(2),
        QUADRATURE_TOL * 1e-3,
    )?;
    let base = tau - tau * tau;
    Ok(VarianceKernel {
        sigma: (base - e_m1) / (f1 * f1) + (base - e_m0) / (f0 * f0) + 0.5 * e_diff,
        sigma_dagger: base * (1.0 / (f1 * f1) + 1.0 / (f0 * f0)),
    })
}

/// Asymptotic variance of the difference in means under matched pairs:
/// `E sigma_1^2 + E sigma_0^2 + E[(m_1 - m_0 - E(m_1 - m_0))^2] / 2`.
pub fn ate_variance(spec: &DgpSpec) -> Result<f64> {
    spec.check()?;
    let tol = QUADRATURE_TOL * 1e-3;
    let noise = spec.expect(
        |l| spec.components(true, l).1.powi(2) + spec.components(false, l).1.powi(2),
        tol,
    )?;
    let gap = |l: [f64; 2]| spec.components(true, l).0 - spec.components(false, l).0;
    let mean_gap = spec.expect(gap, tol)?;
    let spread = spec.expect(|l| (gap(l) - mean_gap).powi(2), tol)?;
    Ok(noise + 0.5 * spread)
}

/// Configuration of a Monte Carlo rejection study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub spec: DgpSpec,
    pub methods: Vec<Method>,
    /// Grid points with pointwise Wald tests.
    pub taus: Vec<f64>,
    /// Pair `(tau1, tau2)` for the test of `q(tau1) - q(tau2)`.
    pub difference: Option<(f64, f64)>,
    /// Grid for the uniform band test.
    pub band_grid: Option<QuantileGrid>,
    /// Offsets added to the truth; `0` gives size and nonzero values give power.
    pub deltas: Vec<f64>,
    pub reps: usize,
    pub b_reps: usize,
    pub seed: u64,
    pub alpha: f64,
    pub sieve: Option<SieveChoice>,
    /// Also test the average effect (multiplier engines only).
    pub ate: bool,
}

impl McConfig {
    pub fn new(spec: DgpSpec, methods: Vec<Method>, reps: usize, b_reps: usize, seed: u64) -> Self {
        let dim = spec.model.covariate_dim();
        Self {
            spec,
            methods,
            taus: vec![0.25, 0.5, 0.75],
            difference: Some((0.25, 0.75)),
            band_grid: None,
            deltas: vec![0.0, 0.5],
            reps,
            b_reps,
            seed,
            alpha: 0.05,
            sieve: Some(SieveChoice::Fixed(SieveSpec::default_for(dim))),
            ate: false,
        }
    }

    /// Union of every grid point any test needs, sorted.
    fn grid(&self) -> Result<QuantileGrid> {
        let mut taus = self.taus.clone();
        if let Some((a, b)) = self.difference {
            taus.extend([a, b]);
        }
        if let Some(g) = &self.band_grid {
            taus.extend_from_slice(g.taus());
        }
        taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        taus.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        QuantileGrid::new(taus)
    }

    /// Labels of the tests run for each method and offset, in output order.
    fn tests_for(&self, method: Method) -> Vec<TestKind> {
        let mut v: Vec<TestKind> = self.taus.iter().map(|&t| TestKind::Point(t)).collect();
        if let Some((a, b)) = self.difference {
            v.push(TestKind::Difference(a, b));
        }
        if self.band_grid.is_some() {
            v.push(TestKind::Uniform);
        }
        if self.ate && method.supports_ate() {
            v.push(TestKind::Ate);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TestKind {
    Point(f64),
    Difference(f64, f64),
    Uniform,
    Ate,
}

impl TestKind {
    fn label(self) -> String {
        match self {
            TestKind::Point(t) => format!("q({t})"),
            TestKind::Difference(a, b) => format!("q({a})-q({b})"),
            TestKind::Uniform => "uniform".into(),
            TestKind::Ate => "ate".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub method: Method,
    pub test: String,
    pub delta: f64,
    pub reps: usize,
    pub rejections: usize,
    /// Repetitions whose test could not be formed (zero or undefined SE); counted as non-rejections.
    pub degenerate: usize,
}

impl McRow {
    pub fn rate(&self) -> f64 {
        self.rejections as f64 / self.reps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub config: McConfig,
    pub rows: Vec<McRow>,
}

impl McResult {
    pub fn row(&self, method: Method, test: &str, delta: f64) -> Option<&McRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.test == test && r.delta == delta)
    }

    /// Rejection rate of the pointwise test at `tau`.
    pub fn point_rate(&self, method: Method, tau: f64, delta: f64) -> Option<f64> {
        self.row(method, &TestKind::Point(tau).label(), delta).map(McRow::rate)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "model", "n_pairs", "method", "test", "delta", "reps", "rejections", "degenerate", "rate",
        ])?;
        for r in &self.rows {
            w.write_record([
                self.config.spec.model.to_string(),
                self.config.spec.n_pairs.to_string(),
                r.method.to_string(),
                r.test.clone(),
                format_real(r.delta),
                r.reps.to_string(),
                r.rejections.to_string(),
                r.degenerate.to_string(),
                format_real(r.rate()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outcome of one test in one repetition.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Outcome {
    Reject,
    Accept,
    Degenerate,
}

fn outcome(r: Result<bool>) -> Result<Outcome> {
    match r {
        Ok(true) => Ok(Outcome::Reject),
        Ok(false) => Ok(Outcome::Accept),
        Err(Error::ZeroSe | Error::TooFewDraws { .. }) => Ok(Outcome::Degenerate),
        Err(e) => Err(e),
    }
}

/// Runs the study. Repetition `r` generates data from seed `derive_seed(seed, r)`,
/// so results are reproducible and independent of scheduling.
pub fn mc_rejection(config: &McConfig) -> Result<McResult> {
    config.spec.check()?;
    if config.reps == 0 {
        return Err(Error::Config("at least one repetition is required".into()));
    }
    if config.methods.is_empty() {
        return Err(Error::Config("no bootstrap methods requested".into()));
    }
    let grid = config.grid()?;
    let truth = true_qte(&config.spec, grid.taus())?;
    let truth_at = |tau: f64| truth[grid.position(tau).expect("tau on grid")];
    let band_idx: Vec<usize> = config
        .band_grid
        .as_ref()
        .map(|g| g.taus().iter().map(|&t| grid.position(t).unwrap()).collect())
        .unwrap_or_default();

    let per_rep: Vec<Result<Vec<Outcome>>> = (0..config.reps as u64)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(config.seed, rep);
            let run = || -> Result<Vec<Outcome>> {
                let sim = generate(&config.spec, &mut stream(rep_seed, 0))?;
                let est = diq_estimate(&sim.sample, grid.taus())?;
                let ate_est = ate_estimate(&sim.sample);
                let mut out = Vec::new();
                for (k, &method) in config.methods.iter().enumerate() {
                    let want_ate = config.ate && method.supports_ate();
                    let mut bc = BootstrapConfig::new(
                        method,
                        config.b_reps,
                        derive_seed(rep_seed, k as u64 + 1),
                        grid.clone(),
                    );
                    bc.sieve = config.sieve.clone();
                    bc.ate = want_ate;
                    let draws = run_bootstrap(&sim.sample, &bc)?;
                    let columns = draws.columns();
                    let band_cols: Vec<Vec<f64>> = band_idx.iter().map(|&i| columns[i].clone()).collect();
                    let band_est: Vec<f64> = band_idx.iter().map(|&i| est[i]).collect();
                    for &delta in &config.deltas {
                        for test in config.tests_for(method) {
                            let r = match test {
                                TestKind::Point(t) => {
                                    let i = grid.position(t).unwrap();
                                    bootstrap_se(&columns[i]).and_then(|se| {
                                        wald_single(est[i], se, truth_at(t) + delta, config.alpha)
                                            .map(|w| w.reject)
                                    })
                                }
                                TestKind::Difference(a, b) => {
                                    let (i, j) = (grid.position(a).unwrap(), grid.position(b).unwrap());
                                    wald_difference(
                                        &columns[i],
                                        &columns[j],
                                        est[i],
                                        est[j],
                                        truth_at(a) - truth_at(b) + delta,
                                        config.alpha,
                                    )
                                    .map(|w| w.reject)
                                }
                                TestKind::Uniform => {
                                    uniform_band(&band_cols, &band_est, config.alpha).map(|b| {
                                        let null: Vec<f64> =
                                            band_idx.iter().map(|&i| truth[i] + delta).collect();
                                        b.rejects(&null)
                                    })
                                }
                                TestKind::Ate => bootstrap_se(draws.ate.as_deref().unwrap()).and_then(|se| {
                                    wald_single(ate_est, se, true_ate(&config.spec) + delta, config.alpha)
                                        .map(|w| w.reject)
                                }),
                            };
                            out.push(outcome(r)?);
                        }
                    }
                }
                Ok(out)
            };
            run().map_err(|e| Error::Repetition {
                rep,
                source: Box::new(e),
            })
        })
        .collect();

    let mut rows: Vec<McRow> = Vec::new();
    for &method in &config.methods {
        for &delta in &config.deltas {
            for test in config.tests_for(method) {
                rows.push(McRow {
                    method,
                    test: test.label(),
                    delta,
                    reps: config.reps,
                    rejections: 0,
                    degenerate: 0,
                });
            }
        }
    }
    for rep in per_rep {
        for (row, o) in rows.iter_mut().zip(rep?) {
            match o {
                Outcome::Reject => row.rejections += 1,
                Outcome::Degenerate => row.degenerate += 1,
                Outcome::Accept => {}
            }
        }
    }
    Ok(McResult {
        config: config.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantile::mean;

    #[test]
    fn model_one_ate_is_zero() {
        let spec = DgpSpec::new(Model::M1, 50);
        let gap = spec
            .expect(|l| spec.components(true, l).0 - spec.components(false, l).0, 1e-12)
            .unwrap();
        assert!(gap.abs() < 1e-12, "{gap}");
        let mut rng = stream(1, 0);
        let v: Vec<f64> = (0..200_000)
            .map(|_| {
                let (a, b) = spec.potential_outcomes(spec.draw_latent(&mut rng), &mut rng);
                b - a
            })
            .collect();
        assert!(mean(&v).abs() < 0.03);
    }

    #[test]
    fn observed_outcomes_follow_assignment() {
        for model in [Model::M1, Model::M2, Model::M3, Model::M4] {
            let sim = generate(&DgpSpec::new(model, 20), &mut stream(2, 0)).unwrap();
            assert_eq!(sim.sample.n(), 20);
            assert_eq!(sim.sample.covariate_dim(), model.covariate_dim());
            for (i, o) in sim.sample.observations().iter().enumerate() {
                assert_eq!(o.y, if o.treated { sim.y1[i] } else { sim.y0[i] });
            }
        }
    }

    #[test]
    fn copula_correlation() {
        let spec = DgpSpec::new(Model::M3, 2);
        let mut rng = stream(3, 0);
        let draws: Vec<[f64; 2]> = (0..100_000)
            .map(|_| {
                let x = spec.covariate(spec.draw_latent(&mut rng));
                let n = Normal::standard();
                [n.inverse_cdf(x[0]), n.inverse_cdf(x[1])]
            })
            .collect();
        let m0 = draws.iter().map(|d| d[0]).sum::<f64>() / draws.len() as f64;
        let m1 = draws.iter().map(|d| d[1]).sum::<f64>() / draws.len() as f64;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for d in &draws {
            sxy += (d[0] - m0) * (d[1] - m1);
            sxx += (d[0] - m0).powi(2);
            syy += (d[1] - m1).powi(2);
        }
        let r = sxy / (sxx * syy).sqrt();
        assert!((r - 0.2).abs() < 0.02, "{r}");
    }

    #[test]
    fn homogeneous_model_has_zero_effects() {
        let spec = DgpSpec::new(Model::M1, 50).homogeneous();
        let taus = [0.1, 0.25, 0.5, 0.75, 0.9];
        for &t in &taus {
            assert_eq!(
                spec.outcome_quantile(true, t).unwrap(),
                spec.outcome_quantile(false, t).unwrap()
            );
            let k = analytic_variance(&spec, t).unwrap();
            assert!((k.sigma - k.sigma_dagger).abs() <= 1e-9 * k.sigma_dagger, "{k:?}");
        }
        let q = true_qte_with(&spec, &taus, 200_000, 5).unwrap();
        assert!(q.iter().all(|v| v.abs() < 0.03), "{q:?}");
    }

    #[test]
    fn normal_quantile_through_quadrature() {
        let spec = DgpSpec::new(Model::M1, 50);
        for t in [0.1, 0.5, 0.8] {
            let q = spec.outcome_quantile(false, t).unwrap();
            assert!((q - Normal::standard().inverse_cdf(t)).abs() < 1e-9);
        }
        let f = spec.outcome_density(false, 0.0).unwrap();
        assert!((f - phi_pdf(0.0)).abs() < 1e-12);
    }

    #[test]
    fn matched_pairs_reduce_variance() {
        for model in [Model::M1, Model::M2, Model::M3, Model::M4] {
            let spec = DgpSpec::new(model, 50);
            for t in [0.25, 0.5, 0.75] {
                let k = analytic_variance(&spec, t).unwrap();
                assert!(k.sigma > 0.0 && k.sigma_dagger >= k.sigma, "{model} {t} {k:?}");
            }
        }
        let k = analytic_variance(&DgpSpec::new(Model::M1, 50), 0.5).unwrap();
        assert!(k.sigma_dagger - k.sigma > 1e-3);
    }

    #[test]
    fn model_one_ate_variance() {
        let v = ate_variance(&DgpSpec::new(Model::M1, 50)).unwrap();
        assert!((v - (2.0 + 50.0 * (0.2 - 1.0 / 9.0))).abs() < 1e-9, "{v}");
    }

    #[test]
    fn truth_is_reproducible_across_seeds() {
        let spec = DgpSpec::new(Model::M1, 50);
        let a = true_qte_with(&spec, &[0.25, 0.5, 0.75], TRUTH_DRAWS, 1).unwrap();
        let b = true_qte_with(&spec, &[0.25, 0.5, 0.75], TRUTH_DRAWS, 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 0.01, "{a:?} {b:?}");
        }
        let exact: Vec<f64> = [0.25, 0.5, 0.75]
            .iter()
            .map(|&t| spec.outcome_quantile(true, t).unwrap() - spec.outcome_quantile(false, t).unwrap())
            .collect();
        for (x, y) in a.iter().zip(&exact) {
            assert!((x - y).abs() < 0.02, "{a:?} {exact:?}");
        }
    }

    #[test]
    fn single_repetition_rates_are_binary() {
        let spec = DgpSpec::new(Model::M1, 10);
        let mut cfg = McConfig::new(spec, Method::ALL.to_vec(), 1, 50, 4);
        cfg.band_grid = Some(QuantileGrid::new(vec![0.3, 0.5, 0.7]).unwrap());
        cfg.ate = true;
        let r = mc_rejection(&cfg).unwrap();
        assert!(r.rows.iter().all(|row| row.rate() == 0.0 || row.rate() == 1.0));
        assert_eq!(r, mc_rejection(&cfg).unwrap());
    }
}
