//! Bootstrap engines for the quantile treatment effect and the average
//! treatment effect.
//!
//! All four engines share one preprocessing step: each arm's outcomes are
//! sorted once, so a replicate only has to permute its weights into sorted
//! order and scan cumulative sums (multiplier engines) or pick an order
//! statistic (gradient engine).
//!
//! Replicate `b` (one-based) always draws from stream `(seed, b)`, which makes
//! [`run_bootstrap`] independent of how replicates are scheduled.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{pair_roles, MatchedSample};
use crate::design::reorder_pairs;
use crate::error::{Error, Result};
use crate::quantile::{arm_quantiles, snapped_ceil, QuantileGrid, SortedArm};
use crate::rng::stream;
use crate::sieve::{select_basis_cv, CvTarget, PropensityModel, ResolvedBasis, SieveSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// i.i.d. Exp(1) weight per unit.
    NaiveMultiplier,
    /// One Exp(1) weight per pair, shared by both members.
    NaivePair,
    /// Perturbed score built from pairs and adjacent pairs of pairs.
    Gradient,
    /// i.i.d. Exp(1) weights on the inverse-propensity-weighted estimator.
    IpwMultiplier,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::NaiveMultiplier,
        Method::NaivePair,
        Method::Gradient,
        Method::IpwMultiplier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::NaiveMultiplier => "naive",
            Method::NaivePair => "naive-pair",
            Method::Gradient => "gradient",
            Method::IpwMultiplier => "ipw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn needs_pairs(self) -> bool {
        matches!(self, Method::NaivePair | Method::Gradient)
    }

    pub fn supports_ate(self) -> bool {
        self != Method::Gradient
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the IPW engine obtains its sieve basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SieveChoice {
    Fixed(SieveSpec),
    /// Leave-one-out selection among the candidates, once per dataset and per arm.
    CrossValidated(Vec<SieveSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub method: Method,
    /// Number of replicates `B`.
    pub reps: usize,
    pub seed: u64,
    pub grid: QuantileGrid,
    /// Required by the IPW engine; ignored by the others.
    pub sieve: Option<SieveChoice>,
    /// Also draw the average treatment effect (multiplier engines only).
    pub ate: bool,
}

impl BootstrapConfig {
    pub fn new(method: Method, reps: usize, seed: u64, grid: QuantileGrid) -> Self {
        Self {
            method,
            reps,
            seed,
            grid,
            sieve: None,
            ate: false,
        }
    }

    pub fn with_sieve(mut self, sieve: SieveChoice) -> Self {
        self.sieve = Some(sieve);
        self
    }

    pub fn with_ate(mut self) -> Self {
        self.ate = true;
        self
    }
}

/// One bootstrap replicate: QTE at every grid point, and optionally the ATE.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub qte: Vec<f64>,
    pub ate: Option<f64>,
}

/// `B x |grid|` replicate matrix (row-major) plus optional ATE replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub method: Method,
    pub seed: u64,
    pub taus: Vec<f64>,
    values: Vec<f64>,
    pub ate: Option<Vec<f64>>,
}

impl BootstrapDraws {
    pub fn from_rows(method: Method, seed: u64, taus: Vec<f64>, rows: Vec<Replicate>) -> Self {
        let ate = rows
            .first()
            .and_then(|r| r.ate)
            .map(|_| rows.iter().map(|r| r.ate.unwrap_or(f64::NAN)).collect());
        let values = rows.into_iter().flat_map(|r| r.qte).collect();
        Self {
            method,
            seed,
            taus,
            values,
            ate,
        }
    }

    pub fn reps(&self) -> usize {
        if self.taus.is_empty() {
            self.ate.as_ref().map_or(0, Vec::len)
        } else {
            self.values.len() / self.taus.len()
        }
    }

    pub fn row(&self, b: usize) -> &[f64] {
        let g = self.taus.len();
        &self.values[b * g..(b + 1) * g]
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        let g = self.taus.len();
        self.values.iter().skip(t).step_by(g).copied().collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.taus.len()).map(|t| self.column(t)).collect()
    }
}

/// Sorted outcomes of one arm and the unit index behind each sorted position.
#[derive(Debug, Clone)]
struct ArmIndex {
    sorted: SortedArm,
    units: Vec<usize>,
    by_unit: Vec<usize>,
}

impl ArmIndex {
    fn new(sample: &MatchedSample, treated: bool) -> Self {
        let obs = sample.observations();
        let by_unit: Vec<usize> = (0..obs.len()).filter(|&i| obs[i].treated == treated).collect();
        let mut units = by_unit.clone();
        units.sort_by(|&a, &b| obs[a].y.partial_cmp(&obs[b].y).unwrap().then(a.cmp(&b)));
        let sorted = SortedArm::new(units.iter().map(|&i| obs[i].y).collect());
        Self {
            sorted,
            units,
            by_unit,
        }
    }

    fn permuted(&self, unit_weights: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(self.units.iter().map(|&i| unit_weights[i]));
    }

    /// Ratio-of-sums (Hajek) mean of the arm under `unit_weights`, summed in unit order.
    fn weighted_mean(&self, unit_weights: &[f64], outcomes: &[f64]) -> f64 {
        let (num, den) = self
            .by_unit
            .iter()
            .fold((0.0, 0.0), |(n, d), &i| (n + unit_weights[i] * outcomes[i], d + unit_weights[i]));
        num / den
    }
}

/// Per-grid-point score terms `tau - 1{Y <= q_a(tau)}` arranged for the gradient draw.
#[derive(Debug, Clone)]
struct GradientScores {
    /// `[tau][j]` for treated and control units of pair `j`.
    pair_treated: Vec<Vec<f64>>,
    pair_control: Vec<Vec<f64>>,
    /// `[tau][k]` differences between the first and second pair of block `k`.
    block_treated: Vec<Vec<f64>>,
    block_control: Vec<Vec<f64>>,
}

/// A dataset prepared for repeated draws of one bootstrap method.
#[derive(Debug, Clone)]
pub struct Engine {
    method: Method,
    taus: Vec<f64>,
    n: usize,
    n_units: usize,
    outcomes: Vec<f64>,
    treated: ArmIndex,
    control: ArmIndex,
    /// Pair index of each unit (pair engines).
    unit_pair: Option<Vec<usize>>,
    gradient: Option<GradientScores>,
    propensity: Option<PropensityModel>,
    /// Separate propensity model for the ATE when its basis was selected differently.
    propensity_ate: Option<PropensityModel>,
    ate: bool,
}

impl Engine {
    /// Prepares `sample` for `method` over `taus`.
    ///
    /// The gradient engine uses the pair order of `sample` as given;
    /// [`run_bootstrap`] re-orders pairs before building it.
    pub fn new(
        sample: &MatchedSample,
        method: Method,
        taus: &[f64],
        sieve: Option<&SieveChoice>,
        ate: bool,
    ) -> Result<Self> {
        if ate && !method.supports_ate() {
            return Err(Error::Config(format!(
                "the {method} bootstrap does not produce ATE draws"
            )));
        }
        let qhat = arm_quantiles(sample, taus)?;
        let n = sample.n();
        let treated = ArmIndex::new(sample, true);
        let control = ArmIndex::new(sample, false);

        let mut unit_pair = None;
        let mut gradient = None;
        let mut propensity = None;
        let mut propensity_ate = None;
        match method {
            Method::NaiveMultiplier => {}
            Method::NaivePair => {
                let mut up = vec![0; sample.observations().len()];
                for (j, &(u, v)) in sample.require_pairs()?.iter().enumerate() {
                    up[u] = j;
                    up[v] = j;
                }
                unit_pair = Some(up);
            }
            Method::Gradient => gradient = Some(gradient_scores(sample, taus, &qhat)?),
            Method::IpwMultiplier => {
                let choice = sieve.ok_or_else(|| {
                    Error::Config("the ipw bootstrap needs a sieve basis".into())
                })?;
                let (qte_model, ate_model) = propensity_models(sample, taus, choice, ate)?;
                propensity = Some(qte_model);
                propensity_ate = ate_model;
            }
        }

        Ok(Self {
            method,
            taus: taus.to_vec(),
            n,
            n_units: sample.observations().len(),
            outcomes: sample.observations().iter().map(|o| o.y).collect(),
            treated,
            control,
            unit_pair,
            gradient,
            propensity,
            propensity_ate,
            ate,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    /// One replicate using `rng` for every random quantity it needs.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Replicate> {
        match self.method {
            Method::NaiveMultiplier => {
                let xi: Vec<f64> = (0..self.n_units).map(|_| rng.sample(Exp1)).collect();
                self.multiplier_replicate(&xi)
            }
            Method::NaivePair => {
                let xi: Vec<f64> = (0..self.n).map(|_| rng.sample(Exp1)).collect();
                self.pair_replicate(&xi)
            }
            Method::Gradient => {
                let eta: Vec<f64> = (0..self.n).map(|_| rng.sample(StandardNormal)).collect();
                let eta_hat: Vec<f64> =
                    (0..self.n / 2).map(|_| rng.sample(StandardNormal)).collect();
                self.gradient_replicate(&eta, &eta_hat)
            }
            Method::IpwMultiplier => {
                let xi: Vec<f64> = (0..self.n_units).map(|_| rng.sample(Exp1)).collect();
                self.ipw_replicate(&xi)
            }
        }
    }

    fn quantile_difference(&self, w_treated: &[f64], w_control: &[f64]) -> Result<Vec<f64>> {
        let mut buf = Vec::with_capacity(self.n);
        let mut q1 = vec![0.0; self.taus.len()];
        let mut q0 = vec![0.0; self.taus.len()];
        self.treated.permuted(w_treated, &mut buf);
        self.treated.sorted.weighted_quantiles(&buf, &self.taus, &mut q1)?;
        self.control.permuted(w_control, &mut buf);
        self.control.sorted.weighted_quantiles(&buf, &self.taus, &mut q0)?;
        Ok(q1.iter().zip(&q0).map(|(a, b)| a - b).collect())
    }

    fn hajek_difference(&self, w_treated: &[f64], w_control: &[f64]) -> f64 {
        self.treated.weighted_mean(w_treated, &self.outcomes)
            - self.control.weighted_mean(w_control, &self.outcomes)
    }

    /// Naive multiplier replicate for explicit per-unit weights.
    pub fn multiplier_replicate(&self, xi: &[f64]) -> Result<Replicate> {
        check_len(xi, self.n_units, "unit weights")?;
        let qte = self.quantile_difference(xi, xi)?;
        let ate = self.ate.then(|| self.hajek_difference(xi, xi));
        Ok(Replicate { qte, ate })
    }

    /// Pair multiplier replicate for explicit per-pair weights.
    pub fn pair_replicate(&self, xi_pairs: &[f64]) -> Result<Replicate> {
        check_len(xi_pairs, self.n, "pair weights")?;
        let unit_pair = self
            .unit_pair
            .as_ref()
            .ok_or_else(|| Error::MissingPairs("engine was built without pairs".into()))?;
        let xi: Vec<f64> = unit_pair.iter().map(|&j| xi_pairs[j]).collect();
        let qte = self.quantile_difference(&xi, &xi)?;
        let ate = self.ate.then(|| self.hajek_difference(&xi, &xi));
        Ok(Replicate { qte, ate })
    }

    /// Perturbation `(T_1(tau), T_0(tau))` at every grid point for given normal multipliers.
    pub fn gradient_perturbation(&self, eta: &[f64], eta_hat: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len(eta, self.n, "pair multipliers")?;
        check_len(eta_hat, self.n / 2, "block multipliers")?;
        let scores = self
            .gradient
            .as_ref()
            .ok_or_else(|| Error::Config("engine was not built for the gradient bootstrap".into()))?;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let t1 = (0..self.taus.len())
            .map(|t| FRAC_1_SQRT_2 * (dot(eta, &scores.pair_treated[t]) + dot(eta_hat, &scores.block_treated[t])))
            .collect();
        let t0 = (0..self.taus.len())
            .map(|t| FRAC_1_SQRT_2 * (dot(eta, &scores.pair_control[t]) + dot(eta_hat, &scores.block_control[t])))
            .collect();
        Ok((t1, t0))
    }

    /// Gradient replicate for explicit multipliers.
    pub fn gradient_replicate(&self, eta: &[f64], eta_hat: &[f64]) -> Result<Replicate> {
        let (t1, t0) = self.gradient_perturbation(eta, eta_hat)?;
        self.gradient_from_perturbation(&t1, &t0)
    }

    /// `Y1_(h1) - Y0_(h0)` with `h_a = ceil(n tau + T_a(tau))` clamped to `[1, n]`.
    pub fn gradient_from_perturbation(&self, t1: &[f64], t0: &[f64]) -> Result<Replicate> {
        check_len(t1, self.taus.len(), "treated perturbations")?;
        check_len(t0, self.taus.len(), "control perturbations")?;
        let qte = self
            .taus
            .iter()
            .zip(t1.iter().zip(t0))
            .map(|(&tau, (&p1, &p0))| {
                let h1 = perturbed_index(self.n, tau, p1);
                let h0 = perturbed_index(self.n, tau, p0);
                self.treated.sorted.order_stat(h1) - self.control.sorted.order_stat(h0)
            })
            .collect();
        Ok(Replicate { qte, ate: None })
    }

    /// IPW multiplier replicate for explicit per-unit weights.
    pub fn ipw_replicate(&self, xi: &[f64]) -> Result<Replicate> {
        check_len(xi, self.n_units, "unit weights")?;
        let model = self
            .propensity
            .as_ref()
            .ok_or_else(|| Error::Config("engine was not built for the ipw bootstrap".into()))?;
        let (w1, w0) = ipw_weights(model, xi)?;
        let qte = self.quantile_difference(&w1, &w0)?;
        let ate = if self.ate {
            Some(match &self.propensity_ate {
                Some(m) => {
                    let (a1, a0) = ipw_weights(m, xi)?;
                    self.hajek_difference(&a1, &a0)
                }
                None => self.hajek_difference(&w1, &w0),
            })
        } else {
            None
        };
        Ok(Replicate { qte, ate })
    }
}

fn check_len(v: &[f64], expected: usize, what: &str) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(Error::Config(format!("{} {what}, expected {expected}", v.len())))
    }
}

fn perturbed_index(n: usize, tau: f64, perturbation: f64) -> usize {
    let h = snapped_ceil(n as f64 * tau + perturbation);
    h.clamp(1.0, n as f64) as usize
}

/// `xi / A_hat` on treated units and `xi / (1 - A_hat)` on controls (zero elsewhere).
fn ipw_weights(model: &PropensityModel, xi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let a_hat = model.fit(xi)?;
    Ok((
        xi.iter().zip(&a_hat).map(|(x, a)| x / a).collect(),
        xi.iter().zip(&a_hat).map(|(x, a)| x / (1.0 - a)).collect(),
    ))
}

fn gradient_scores(sample: &MatchedSample, taus: &[f64], qhat: &[(f64, f64)]) -> Result<GradientScores> {
    let roles = pair_roles(sample)?;
    let y = |i: usize| sample.observations()[i].y;
    let score = |i: usize, tau: f64, q: f64| tau - if y(i) <= q { 1.0 } else { 0.0 };
    let mut s = GradientScores {
        pair_treated: Vec::with_capacity(taus.len()),
        pair_control: Vec::with_capacity(taus.len()),
        block_treated: Vec::with_capacity(taus.len()),
        block_control: Vec::with_capacity(taus.len()),
    };
    for (&tau, &(q1, q0)) in taus.iter().zip(qhat) {
        s.pair_treated.push(roles.treated.iter().map(|&i| score(i, tau, q1)).collect());
        s.pair_control.push(roles.control.iter().map(|&i| score(i, tau, q0)).collect());
        s.block_treated.push(
            roles
                .blocks
                .iter()
                .map(|b| score(b[0], tau, q1) - score(b[2], tau, q1))
                .collect(),
        );
        s.block_control.push(
            roles
                .blocks
                .iter()
                .map(|b| score(b[1], tau, q0) - score(b[3], tau, q0))
                .collect(),
        );
    }
    Ok(s)
}

/// Resolves the propensity model for the QTE draws and, when cross-validating
/// with ATE draws requested, a second model selected on the mean target.
fn propensity_models(
    sample: &MatchedSample,
    taus: &[f64],
    choice: &SieveChoice,
    ate: bool,
) -> Result<(PropensityModel, Option<PropensityModel>)> {
    match choice {
        SieveChoice::Fixed(spec) => {
            let basis = ResolvedBasis::resolve(spec, sample)?;
            Ok((PropensityModel::shared(sample, basis), None))
        }
        SieveChoice::CrossValidated(candidates) => {
            let build = |target: CvTarget| -> Result<PropensityModel> {
                let sel = select_basis_cv(sample, candidates, target)?;
                Ok(PropensityModel::per_arm(
                    sample,
                    ResolvedBasis::resolve(&candidates[sel.treated], sample)?,
                    ResolvedBasis::resolve(&candidates[sel.control], sample)?,
                ))
            };
            let qte = if taus.is_empty() {
                build(CvTarget::Mean)?
            } else {
                build(CvTarget::Quantile(taus[(taus.len() - 1) / 2]))?
            };
            let ate = if ate && !taus.is_empty() {
                Some(build(CvTarget::Mean)?)
            } else {
                None
            };
            Ok((qte, ate))
        }
    }
}

/// Naive multiplier replicate with weights from `rng`.
pub fn naive_multiplier_draw<R: Rng + ?Sized>(
    sample: &MatchedSample,
    grid: &QuantileGrid,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Engine::new(sample, Method::NaiveMultiplier, grid.taus(), None, false)?
        .draw(rng)
        .map(|r| r.qte)
}

/// Pair multiplier replicate with weights from `rng`.
pub fn naive_pair_draw<R: Rng + ?Sized>(
    sample: &MatchedSample,
    grid: &QuantileGrid,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Engine::new(sample, Method::NaivePair, grid.taus(), None, false)?
        .draw(rng)
        .map(|r| r.qte)
}

/// Gradient replicate using the pair order of `sample` (re-order it first).
pub fn gradient_draw<R: Rng + ?Sized>(
    sample: &MatchedSample,
    grid: &QuantileGrid,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Engine::new(sample, Method::Gradient, grid.taus(), None, false)?
        .draw(rng)
        .map(|r| r.qte)
}

/// IPW multiplier replicate with a fixed sieve basis.
pub fn ipw_draw<R: Rng + ?Sized>(
    sample: &MatchedSample,
    grid: &QuantileGrid,
    rng: &mut R,
    spec: &SieveSpec,
) -> Result<Vec<f64>> {
    let choice = SieveChoice::Fixed(spec.clone());
    Engine::new(sample, Method::IpwMultiplier, grid.taus(), Some(&choice), false)?
        .draw(rng)
        .map(|r| r.qte)
}

/// IPW multiplier replicate of the average treatment effect.
pub fn ipw_ate_draw<R: Rng + ?Sized>(sample: &MatchedSample, rng: &mut R, spec: &SieveSpec) -> Result<f64> {
    let choice = SieveChoice::Fixed(spec.clone());
    let r = Engine::new(sample, Method::IpwMultiplier, &[], Some(&choice), true)?.draw(rng)?;
    Ok(r.ate.expect("ate requested"))
}

/// Runs `B` replicates; replicate `b` draws from stream `(seed, b)`.
///
/// The gradient engine re-orders pairs first. Work is spread over the
/// current rayon pool; the result does not depend on its size.
pub fn run_bootstrap(sample: &MatchedSample, config: &BootstrapConfig) -> Result<BootstrapDraws> {
    if config.reps == 0 {
        return Err(Error::Config("at least one bootstrap replicate is required".into()));
    }
    if config.method.needs_pairs() {
        sample.require_pairs()?;
    }
    let reordered;
    let sample = if config.method == Method::Gradient {
        reordered = reorder_pairs(sample)?;
        &reordered
    } else {
        sample
    };
    let engine = Engine::new(
        sample,
        config.method,
        config.grid.taus(),
        config.sieve.as_ref(),
        config.ate,
    )?;
    let results: Vec<Result<Replicate>> = (1..=config.reps as u64)
        .into_par_iter()
        .map(|b| {
            engine
                .draw(&mut stream(config.seed, b))
                .map_err(|e| Error::Replicate {
                    b,
                    source: Box::new(e),
                })
        })
        .collect();
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(BootstrapDraws::from_rows(
        config.method,
        config.seed,
        config.grid.taus().to_vec(),
        rows,
    ))
}
