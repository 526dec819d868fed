//! Sieve bases for the weighted linear propensity regression, plus
//! leave-one-out cross-validation for choosing the basis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::MatchedSample;
use crate::error::{Error, Result};
use crate::quantile::{arm_quantiles, empirical_quantile};

/// Fitted propensities are clamped to `[PROPENSITY_FLOOR, 1 - PROPENSITY_FLOOR]`.
pub const PROPENSITY_FLOOR: f64 = 0.01;
/// Gram matrices with a larger eigenvalue ratio are treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;
/// Leverages at or above `1 - LEVERAGE_SLACK` make the LOO residual undefined.
pub const LEVERAGE_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SieveFamily {
    /// `1, x, ..., x^degree` per covariate.
    Power,
    /// Order-`r` truncated power splines: `1, x, ..., x^(r-1), max(x - t, 0)^(r-1)`.
    Spline,
}

/// Knot locations given as quantile levels of each covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotLevels {
    Shared(Vec<f64>),
    PerCovariate(Vec<Vec<f64>>),
}

impl KnotLevels {
    fn for_covariate(&self, l: usize) -> &[f64] {
        match self {
            KnotLevels::Shared(v) => v,
            KnotLevels::PerCovariate(v) => &v[l],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveSpec {
    pub family: SieveFamily,
    /// Polynomial degree for `Power`, spline order `r` for `Spline`.
    pub degree: usize,
    pub knots: KnotLevels,
    pub interactions: bool,
}

impl SieveSpec {
    pub fn power(degree: usize) -> Self {
        Self {
            family: SieveFamily::Power,
            degree,
            knots: KnotLevels::Shared(Vec::new()),
            interactions: false,
        }
    }

    pub fn intercept_only() -> Self {
        Self::power(0)
    }

    pub fn spline(order: usize, knot_levels: Vec<f64>) -> Self {
        Self {
            family: SieveFamily::Spline,
            degree: order,
            knots: KnotLevels::Shared(knot_levels),
            interactions: false,
        }
    }

    pub fn spline_per_covariate(order: usize, knot_levels: Vec<Vec<f64>>) -> Self {
        Self {
            family: SieveFamily::Spline,
            degree: order,
            knots: KnotLevels::PerCovariate(knot_levels),
            interactions: false,
        }
    }

    pub fn with_interactions(mut self) -> Self {
        self.interactions = true;
        self
    }

    /// Default basis: for one covariate `{1, x, x^2, max(x - q50, 0)^2}`; for
    /// several, linear splines with a median knot plus pairwise products.
    pub fn default_for(dim: usize) -> Self {
        if dim == 1 {
            Self::spline(3, vec![0.5])
        } else {
            Self::spline(2, vec![0.5]).with_interactions()
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if dim == 0 {
            return Err(Error::BadSpec("no covariates".into()));
        }
        if self.family == SieveFamily::Spline && self.degree == 0 {
            return Err(Error::BadSpec("spline order must be at least 1".into()));
        }
        if let KnotLevels::PerCovariate(v) = &self.knots {
            if v.len() != dim {
                return Err(Error::BadSpec(format!(
                    "knot levels for {} covariates, data has {dim}",
                    v.len()
                )));
            }
        }
        for l in 0..dim {
            if self
                .knots
                .for_covariate(l)
                .iter()
                .any(|&p| !(p > 0.0 && p < 1.0))
            {
                return Err(Error::BadSpec("knot levels must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Basis dimension `K` for `dim` covariates.
    pub fn dimension(&self, dim: usize) -> usize {
        let per_covariate: usize = (0..dim)
            .map(|l| match self.family {
                SieveFamily::Power => self.degree,
                SieveFamily::Spline => self.degree - 1 + self.knots.for_covariate(l).len(),
            })
            .sum();
        let inter = if self.interactions { dim * (dim - 1) / 2 } else { 0 };
        1 + per_covariate + inter
    }
}

/// Sieve candidates for cross-validation (one and two covariates follow the
/// simulation study; more covariates reuse the two-covariate pattern with shared knots).
pub fn cv_candidates(dim: usize) -> Vec<SieveSpec> {
    match dim {
        1 => vec![
            SieveSpec::spline(2, vec![0.5]),
            SieveSpec::spline(2, vec![0.3, 0.7]),
            SieveSpec::spline(3, vec![0.5]),
            SieveSpec::spline(3, vec![0.3, 0.7]),
        ],
        2 => vec![
            SieveSpec::spline(2, vec![0.5]).with_interactions(),
            SieveSpec::spline_per_covariate(2, vec![vec![0.3, 0.7], vec![0.5, 0.7]])
                .with_interactions(),
            SieveSpec::spline(3, vec![0.5]).with_interactions(),
            SieveSpec::spline_per_covariate(3, vec![vec![0.3, 0.7], vec![0.5, 0.7]])
                .with_interactions(),
        ],
        _ => vec![
            SieveSpec::spline(2, vec![0.5]).with_interactions(),
            SieveSpec::spline(2, vec![0.3, 0.7]).with_interactions(),
            SieveSpec::spline(3, vec![0.5]).with_interactions(),
            SieveSpec::spline(3, vec![0.3, 0.7]).with_interactions(),
        ],
    }
}

/// A spec with knots turned into covariate values.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedBasis {
    spec: SieveSpec,
    knot_values: Vec<Vec<f64>>,
}

impl ResolvedBasis {
    /// Places knots at empirical quantiles of each covariate over all units.
    pub fn resolve(spec: &SieveSpec, sample: &MatchedSample) -> Result<Self> {
        let dim = sample.covariate_dim();
        spec.check(dim)?;
        let knot_values = (0..dim)
            .map(|l| {
                let column: Vec<f64> = sample.observations().iter().map(|o| o.x[l]).collect();
                spec.knots
                    .for_covariate(l)
                    .iter()
                    .map(|&p| empirical_quantile(&column, p))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            knot_values,
        })
    }

    pub fn with_knots(spec: &SieveSpec, knot_values: Vec<Vec<f64>>) -> Result<Self> {
        spec.check(knot_values.len())?;
        Ok(Self {
            spec: spec.clone(),
            knot_values,
        })
    }

    pub fn spec(&self) -> &SieveSpec {
        &self.spec
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension(self.knot_values.len())
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dimension());
        out.push(1.0);
        let r = self.spec.degree;
        for (l, &xl) in x.iter().enumerate() {
            match self.spec.family {
                SieveFamily::Power => out.extend((1..=r).map(|p| xl.powi(p as i32))),
                SieveFamily::Spline => {
                    out.extend((1..r).map(|p| xl.powi(p as i32)));
                    out.extend(self.knot_values[l].iter().map(|&t| {
                        if xl > t {
                            (xl - t).powi(r as i32 - 1)
                        } else {
                            0.0
                        }
                    }));
                }
            }
        }
        if self.spec.interactions {
            for l in 0..x.len() {
                for m in l + 1..x.len() {
                    out.push(x[l] * x[m]);
                }
            }
        }
        out
    }

    /// Row-major `units x K` design matrix over the whole sample.
    fn design(&self, sample: &MatchedSample) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = sample.observations().iter().map(|o| self.eval(&o.x)).collect();
        DMatrix::from_fn(rows.len(), self.dimension(), |i, k| rows[i][k])
    }
}

/// Evaluates the basis of `spec` at `x` with already resolved knot values.
pub fn build_basis(x: &[f64], spec: &SieveSpec, knot_values: &[Vec<f64>]) -> Result<Vec<f64>> {
    if x.len() != knot_values.len() {
        return Err(Error::BadSpec(format!(
            "{} covariates but knots for {}",
            x.len(),
            knot_values.len()
        )));
    }
    Ok(ResolvedBasis::with_knots(spec, knot_values.to_vec())?.eval(x))
}

/// Solves `min_theta sum_i w_i (t_i - b_i' theta)^2` through the normal
/// equations; returns the coefficients and the inverse Gram matrix.
fn weighted_least_squares(
    design: &DMatrix<f64>,
    weights: Option<&[f64]>,
    target: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = design.ncols();
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for i in 0..design.nrows() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let row = design.row(i);
        for a in 0..k {
            let wa = w * row[a];
            rhs[a] += wa * target[i];
            for b in a..k {
                gram[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= CONDITION_LIMIT) {
        return Err(Error::SingularDesign {
            condition,
            threshold: CONDITION_LIMIT,
        });
    }
    let singular = Error::SingularDesign {
        condition,
        threshold: CONDITION_LIMIT,
    };
    // LU rather than Cholesky: an intercept-only fit then returns mean(A) exactly
    let lu = gram.lu();
    let theta = lu.solve(&rhs).ok_or(singular)?;
    let inverse = lu.try_inverse().ok_or(Error::SingularDesign {
        condition,
        threshold: CONDITION_LIMIT,
    })?;
    Ok((theta, inverse))
}

/// Linear-probability propensity fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    pub theta: Vec<f64>,
    /// Fitted propensity of every unit, clamped to `[0.01, 0.99]`.
    pub a_hat: Vec<f64>,
    /// How many fitted values hit the clamp.
    pub clamped: usize,
    pub spec: SieveSpec,
}

fn clamp_propensity(v: f64) -> (f64, bool) {
    let c = v.clamp(PROPENSITY_FLOOR, 1.0 - PROPENSITY_FLOOR);
    (c, c != v)
}

/// Weighted least-squares regression of the treatment indicator on the sieve basis.
pub fn fit_propensity(
    sample: &MatchedSample,
    spec: &SieveSpec,
    weights: &[f64],
) -> Result<PropensityFit> {
    let basis = ResolvedBasis::resolve(spec, sample)?;
    let model = PropensityModel::shared(sample, basis);
    model.fit_detailed(weights).map(|(fits, clamped)| {
        let (theta, a_hat) = fits;
        PropensityFit {
            theta,
            a_hat,
            clamped,
            spec: spec.clone(),
        }
    })
}

/// Precomputed design for repeated propensity fits with new weights.
///
/// With separate treated/control bases, each arm's coefficient vector is
/// fitted on all units with that arm's basis and used for that arm's units.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    treated_design: DMatrix<f64>,
    control_design: Option<DMatrix<f64>>,
    treatment: Vec<f64>,
    is_treated: Vec<bool>,
}

impl PropensityModel {
    pub fn shared(sample: &MatchedSample, basis: ResolvedBasis) -> Self {
        Self::build(sample, &basis, None)
    }

    pub fn per_arm(sample: &MatchedSample, treated: ResolvedBasis, control: ResolvedBasis) -> Self {
        if treated == control {
            Self::build(sample, &treated, None)
        } else {
            Self::build(sample, &treated, Some(&control))
        }
    }

    fn build(sample: &MatchedSample, treated: &ResolvedBasis, control: Option<&ResolvedBasis>) -> Self {
        let is_treated: Vec<bool> = sample.observations().iter().map(|o| o.treated).collect();
        Self {
            treated_design: treated.design(sample),
            control_design: control.map(|c| c.design(sample)),
            treatment: is_treated.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect(),
            is_treated,
        }
    }

    /// Clamped fitted propensities for the given per-unit weights.
    pub fn fit(&self, weights: &[f64]) -> Result<Vec<f64>> {
        self.fit_detailed(weights).map(|((_, a), _)| a)
    }

    #[allow(clippy::type_complexity)]
    fn fit_detailed(&self, weights: &[f64]) -> Result<((Vec<f64>, Vec<f64>), usize)> {
        let (theta_t, _) = weighted_least_squares(&self.treated_design, Some(weights), &self.treatment)?;
        let fitted_t = &self.treated_design * &theta_t;
        let fitted_c = match &self.control_design {
            Some(d) => {
                let (theta_c, _) = weighted_least_squares(d, Some(weights), &self.treatment)?;
                d * theta_c
            }
            None => fitted_t.clone(),
        };
        let mut clamped = 0;
        let a_hat = (0..self.treatment.len())
            .map(|i| {
                let raw = if self.is_treated[i] { fitted_t[i] } else { fitted_c[i] };
                let (v, hit) = clamp_propensity(raw);
                clamped += hit as usize;
                v
            })
            .collect();
        Ok(((theta_t.iter().copied().collect(), a_hat), clamped))
    }
}

/// Outcome-side target regressed on the basis when cross-validating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvTarget {
    /// `1{Y <= q_a(tau)}` within each arm.
    Quantile(f64),
    /// `Y` itself.
    Mean,
}

/// Leave-one-out score `(1/n) sum_j e_j^2 / (1 - h_j)^2` for each arm,
/// returned as `(treated, control)`.
pub fn loo_cv_score(sample: &MatchedSample, spec: &SieveSpec, target: CvTarget) -> Result<(f64, f64)> {
    let basis = ResolvedBasis::resolve(spec, sample)?;
    let cut = match target {
        CvTarget::Quantile(tau) => Some(arm_quantiles(sample, &[tau])?[0]),
        CvTarget::Mean => None,
    };
    let arm_score = |treated: bool| -> Result<f64> {
        let units: Vec<&crate::data::Observation> = sample
            .observations()
            .iter()
            .filter(|o| o.treated == treated)
            .collect();
        let k = basis.dimension();
        let design = DMatrix::from_fn(units.len(), k, |i, c| basis.eval(&units[i].x)[c]);
        let d: Vec<f64> = units
            .iter()
            .map(|o| match cut {
                Some((q1, q0)) => {
                    let q = if treated { q1 } else { q0 };
                    if o.y <= q {
                        1.0
                    } else {
                        0.0
                    }
                }
                None => o.y,
            })
            .collect();
        let (beta, gram_inv) = weighted_least_squares(&design, None, &d)?;
        let mut total = 0.0;
        for (j, &dj) in d.iter().enumerate() {
            let row = design.row(j).transpose();
            let fitted = row.dot(&beta);
            let h = (gram_inv.clone() * &row).dot(&row);
            if h >= 1.0 - LEVERAGE_SLACK {
                return Err(Error::LeverageOne { index: j, leverage: h });
            }
            let e = dj - fitted;
            total += e * e / ((1.0 - h) * (1.0 - h));
        }
        Ok(total / d.len() as f64)
    };
    Ok((arm_score(true)?, arm_score(false)?))
}

/// Per-arm basis choice by cross-validation.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSelection {
    pub treated: usize,
    pub control: usize,
    /// Per candidate `(treated, control)` score, `None` when it could not be scored.
    pub scores: Vec<Option<(f64, f64)>>,
}

/// Picks, separately for each arm, the candidate with the smallest LOO score;
/// ties go to the smaller basis, then to the earlier candidate.
pub fn select_basis_cv(
    sample: &MatchedSample,
    candidates: &[SieveSpec],
    target: CvTarget,
) -> Result<CvSelection> {
    if candidates.is_empty() {
        return Err(Error::Config("no sieve candidates given".into()));
    }
    let dim = sample.covariate_dim();
    let scores: Vec<Option<(f64, f64)>> = candidates
        .iter()
        .map(|c| loo_cv_score(sample, c, target).ok())
        .collect();
    let pick = |arm: fn(&(f64, f64)) -> f64| -> Option<usize> {
        scores
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (i, arm(s))))
            .min_by(|(i, a), (j, b)| {
                a.partial_cmp(b)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(candidates[*i].dimension(dim).cmp(&candidates[*j].dimension(dim)))
                    .then(i.cmp(j))
            })
            .map(|(i, _)| i)
    };
    let treated = pick(|s| s.0).ok_or(Error::AllCandidatesFailed)?;
    let control = pick(|s| s.1).ok_or(Error::AllCandidatesFailed)?;
    Ok(CvSelection {
        treated,
        control,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{validate_sample, Observation};

    #[test]
    fn basis_examples() {
        let knots = vec![vec![0.5]];
        assert_eq!(build_basis(&[2.0], &SieveSpec::power(2), &[vec![]]).unwrap(), vec![1.0, 2.0, 4.0]);
        let b = build_basis(&[0.7], &SieveSpec::spline(2, vec![0.5]), &knots).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b[0..2], [1.0, 0.7]);
        assert!((b[2] - 0.2).abs() < 1e-15);
        assert_eq!(
            build_basis(&[0.3], &SieveSpec::spline(2, vec![0.5]), &knots).unwrap(),
            vec![1.0, 0.3, 0.0]
        );
        assert!(matches!(
            build_basis(&[0.3], &SieveSpec::spline(0, vec![0.5]), &knots),
            Err(Error::BadSpec(_))
        ));
    }

    #[test]
    fn two_covariate_default_basis() {
        let spec = SieveSpec::default_for(2);
        let b = build_basis(&[0.7, 0.2], &spec, &[vec![0.5], vec![0.5]]).unwrap();
        assert_eq!(spec.dimension(2), 6);
        assert_eq!(b.len(), 6);
        assert_eq!(b[0], 1.0);
        assert!((b[5] - 0.14).abs() < 1e-15);
    }

    fn toy_sample(x: &[f64]) -> MatchedSample {
        // consecutive units form a pair; the first of each pair is treated
        let raw = x
            .iter()
            .enumerate()
            .map(|(i, &xi)| Observation::new(i as f64, vec![xi], i % 2 == 0).with_pair(i as u64 / 2))
            .collect();
        validate_sample(raw, true).unwrap()
    }

    #[test]
    fn intercept_regression_gives_one_half() {
        let s = toy_sample(&[0.1, 0.4, 0.3, 0.9, 0.5, 0.2]);
        let fit = fit_propensity(&s, &SieveSpec::intercept_only(), &[1.0; 6]).unwrap();
        assert_eq!(fit.theta, vec![0.5]);
        assert!(fit.a_hat.iter().all(|&a| a == 0.5));
    }

    #[test]
    fn constant_within_pair_gives_zero_slope() {
        let s = toy_sample(&[0.1, 0.1, 0.4, 0.4, 0.8, 0.8]);
        let fit = fit_propensity(&s, &SieveSpec::power(1), &[1.0; 6]).unwrap();
        assert!((fit.theta[0] - 0.5).abs() < 1e-12);
        assert!(fit.theta[1].abs() < 1e-12);
    }

    #[test]
    fn duplicate_columns_are_singular() {
        let s = toy_sample(&[0.1, 0.4, 0.3, 0.9, 0.5, 0.2]);
        // knot below every value: max(x - t, 0) = x - t, collinear with {1, x}
        let spec = SieveSpec::spline(2, vec![0.01]);
        let basis = ResolvedBasis::with_knots(&spec, vec![vec![-1.0]]).unwrap();
        let model = PropensityModel::shared(&s, basis);
        assert!(matches!(model.fit(&[1.0; 6]), Err(Error::SingularDesign { .. })));
    }

    #[test]
    fn mean_of_fitted_propensity_is_one_half() {
        let x = [0.05, 0.11, 0.32, 0.29, 0.5, 0.61, 0.77, 0.7, 0.93, 0.88];
        let s = toy_sample(&x);
        let fit = fit_propensity(&s, &SieveSpec::spline(3, vec![0.5]), &[1.0; 10]).unwrap();
        assert_eq!(fit.clamped, 0);
        let m = fit.a_hat.iter().sum::<f64>() / 10.0;
        assert!((m - 0.5).abs() < 1e-12, "{m}");
    }

    #[test]
    fn cv_perfect_fit_scores_zero() {
        let s = toy_sample(&[0.1, 0.4, 0.3, 0.9, 0.5, 0.2]);
        // tau = 0.99 puts every unit at or below the arm quantile: D constant
        let (t, c) = loo_cv_score(&s, &SieveSpec::intercept_only(), CvTarget::Quantile(0.99)).unwrap();
        assert!(t < 1e-25 && c < 1e-25, "{t} {c}");
    }

    #[test]
    fn cv_saturated_basis_has_leverage_one() {
        let s = toy_sample(&[0.1, 0.4, 0.3, 0.9, 0.5, 0.2]);
        // three units per arm, three basis functions
        assert!(matches!(
            loo_cv_score(&s, &SieveSpec::power(2), CvTarget::Mean),
            Err(Error::LeverageOne { .. })
        ));
    }

    #[test]
    fn cv_tie_rules() {
        let x = [0.05, 0.11, 0.32, 0.29, 0.5, 0.61, 0.77, 0.7, 0.93, 0.88];
        let s = toy_sample(&x);
        let one = select_basis_cv(&s, &[SieveSpec::power(1)], CvTarget::Mean).unwrap();
        assert_eq!((one.treated, one.control), (0, 0));
        let twins = [SieveSpec::power(1), SieveSpec::power(1)];
        let sel = select_basis_cv(&s, &twins, CvTarget::Mean).unwrap();
        assert_eq!((sel.treated, sel.control), (0, 0));
        let bad = [SieveSpec::power(9)];
        assert!(matches!(
            select_basis_cv(&s, &bad, CvTarget::Mean),
            Err(Error::AllCandidatesFailed)
        ));
    }
}
