//! Large-sample variance of weighted estimators for univariate two-group
//! scenarios, evaluated by quadrature, plus a Monte Carlo cross-check.
//!
//! For group densities `f1`, `f0` and group fractions `q1`, `q0`, the pooled
//! density is `f = q1 f1 + q0 f0` and the implied score is
//! `e = q1 f1 / f`. A tilt `h` has normalized asymptotic variance
//! `N Var = integral(f h^2 [v1/e + v0/(1-e)]) / integral(f h)^2`; dividing by
//! `v (1/q1 + 1/q0)` gives the variance relative to the unweighted
//! difference of means.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::estimate::{replicate_rng, wate};
use crate::propensity::{fit, FitOptions, PropensityModel};
use crate::quadrature::{integrate, uniform_breaks};
use crate::weights::{compute, WeightScheme};

/// Absolute tolerance for every quadrature in this module.
pub const QUADRATURE_TOLERANCE: f64 = 1e-9;
/// Absolute bound on the integrand times the range width at the range ends.
const EDGE_TOLERANCE: f64 = 1e-6;
/// Half-width of the integration range in units of the largest normal sd.
pub const RANGE_SDS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum AsymptoticsError {
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("both densities are zero at x = {0}")]
    ZeroDensity(f64),
    #[error("scheme '{0}' is not a function of the propensity score")]
    NotScoreBased(String),
    #[error("no candidate schemes given")]
    NoCandidates,
    #[error("invalid scenario file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Univariate covariate density for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Density {
    Normal { mean: f64, sd: f64 },
    /// Piecewise-linear density through the given knots, zero outside.
    Tabulated { x: Vec<f64>, density: Vec<f64> },
}

impl Density {
    pub fn normal(mean: f64, sd: f64) -> Self {
        Density::Normal { mean, sd }
    }

    fn validate(&self) -> Result<(), AsymptoticsError> {
        match self {
            Density::Normal { mean, sd } => {
                if !(sd.is_finite() && *sd > 0.0 && mean.is_finite()) {
                    return Err(AsymptoticsError::InvalidDensity(format!("normal({mean}, {sd})")));
                }
            }
            Density::Tabulated { x, density } => {
                if x.len() < 2 || x.len() != density.len() {
                    return Err(AsymptoticsError::InvalidDensity(
                        "tabulated density needs matching x and density of length >= 2".into(),
                    ));
                }
                if x.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(AsymptoticsError::InvalidDensity("knots must increase".into()));
                }
                if density.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
                    return Err(AsymptoticsError::InvalidDensity("negative or non-finite density".into()));
                }
                let mass = self.tabulated_mass();
                if (mass - 1.0).abs() > 1e-6 {
                    return Err(AsymptoticsError::InvalidDensity(format!("tabulated density integrates to {mass}")));
                }
            }
        }
        Ok(())
    }

    fn tabulated_mass(&self) -> f64 {
        match self {
            Density::Tabulated { x, density } => x
                .windows(2)
                .zip(density.windows(2))
                .map(|(xw, dw)| 0.5 * (dw[0] + dw[1]) * (xw[1] - xw[0]))
                .sum(),
            Density::Normal { .. } => 1.0,
        }
    }

    pub fn ln_pdf(&self, t: f64) -> f64 {
        match self {
            Density::Normal { mean, sd } => {
                let u = (t - mean) / sd;
                -0.5 * u * u - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            Density::Tabulated { .. } => self.pdf(t).ln(),
        }
    }

    pub fn pdf(&self, t: f64) -> f64 {
        match self {
            Density::Normal { .. } => self.ln_pdf(t).exp(),
            Density::Tabulated { x, density } => {
                if t < x[0] || t > x[x.len() - 1] {
                    return 0.0;
                }
                let k = x.partition_point(|v| *v <= t).clamp(1, x.len() - 1);
                let (x0, x1) = (x[k - 1], x[k]);
                let (d0, d1) = (density[k - 1], density[k]);
                d0 + (d1 - d0) * (t - x0) / (x1 - x0)
            }
        }
    }

    fn support(&self) -> (f64, f64) {
        match self {
            Density::Normal { mean, sd } => (mean - RANGE_SDS * sd, mean + RANGE_SDS * sd),
            Density::Tabulated { x, .. } => (x[0], x[x.len() - 1]),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Density::Normal { mean, sd } => Normal::new(*mean, *sd).expect("validated normal").sample(rng),
            Density::Tabulated { x, density } => {
                let total = self.tabulated_mass();
                let mut target = rng.random::<f64>() * total;
                for k in 1..x.len() {
                    let (x0, x1) = (x[k - 1], x[k]);
                    let (d0, d1) = (density[k - 1], density[k]);
                    let width = x1 - x0;
                    let seg = 0.5 * (d0 + d1) * width;
                    if target > seg && k < x.len() - 1 {
                        target -= seg;
                        continue;
                    }
                    let target = target.min(seg);
                    // solve d0 s + (d1 - d0) s^2 / (2 width) = target
                    let a = (d1 - d0) / (2.0 * width);
                    let s = if a.abs() < 1e-14 * (d0 + d1).max(1e-300) {
                        if d0 > 0.0 { target / d0 } else { 0.0 }
                    } else {
                        (-d0 + (d0 * d0 + 4.0 * a * target).max(0.0).sqrt()) / (2.0 * a)
                    };
                    return x0 + s.clamp(0.0, width);
                }
                x[x.len() - 1]
            }
        }
    }
}

fn default_variance() -> f64 {
    1.0
}

fn default_schemes() -> Vec<WeightScheme> {
    vec![WeightScheme::Combined, WeightScheme::Truncated { alpha: 0.1 }, WeightScheme::Overlap]
}

/// Two-group univariate scenario with homoscedastic residual variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub treated: Density,
    pub control: Density,
    /// n0 / n1
    pub size_ratio: f64,
    #[serde(default = "default_variance")]
    pub residual_variance: f64,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<WeightScheme>,
}

/// The pooled density and implied score at a point.
#[derive(Debug, Clone, Copy)]
struct Mixture {
    f: f64,
    e: f64,
    e_complement: f64,
}

impl ScenarioSpec {
    pub fn new(name: impl Into<String>, treated: Density, control: Density, size_ratio: f64) -> Result<Self, AsymptoticsError> {
        let spec = ScenarioSpec {
            name: name.into(),
            treated,
            control,
            size_ratio,
            residual_variance: 1.0,
            schemes: default_schemes(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), AsymptoticsError> {
        self.treated.validate()?;
        self.control.validate()?;
        if !(self.size_ratio > 0.0 && self.size_ratio.is_finite()) {
            return Err(AsymptoticsError::InvalidScenario(format!("size ratio {}", self.size_ratio)));
        }
        if !(self.residual_variance > 0.0 && self.residual_variance.is_finite()) {
            return Err(AsymptoticsError::InvalidScenario(format!(
                "residual variance {}",
                self.residual_variance
            )));
        }
        Ok(())
    }

    /// Group fractions (q1, q0).
    pub fn fractions(&self) -> (f64, f64) {
        (1.0 / (1.0 + self.size_ratio), self.size_ratio / (1.0 + self.size_ratio))
    }

    /// Four reference scenarios: shifted normals, a larger shift, unequal
    /// group sizes, and unequal spread.
    pub fn reference_scenarios() -> Vec<ScenarioSpec> {
        let n = Density::normal;
        vec![
            ScenarioSpec::new("(1)", n(0.0, 1.0), n(1.0, 1.0), 1.0),
            ScenarioSpec::new("(2)", n(0.0, 1.0), n(2.0, 1.0), 1.0),
            ScenarioSpec::new("(3)", n(0.0, 1.0), n(1.0, 1.0), 20.0),
            ScenarioSpec::new("(4)", n(0.0, 1.0), n(0.0, 20.0), 1.0),
        ]
        .into_iter()
        .map(|s| s.expect("reference scenarios are valid"))
        .collect()
    }

    fn mixture(&self, x: f64) -> Option<Mixture> {
        let (q1, q0) = self.fractions();
        let a = q1.ln() + self.treated.ln_pdf(x);
        let b = q0.ln() + self.control.ln_pdf(x);
        if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
            return None;
        }
        let hi = a.max(b);
        let f = hi.exp() * ((a - hi).exp() + (b - hi).exp());
        Some(Mixture {
            f,
            e: 1.0 / (1.0 + (b - a).exp()),
            e_complement: 1.0 / (1.0 + (a - b).exp()),
        })
    }

    /// Integration range and whether it cuts off the tails of a normal.
    fn range(&self) -> (f64, f64, bool) {
        let (l1, h1) = self.treated.support();
        let (l0, h0) = self.control.support();
        let truncated_tails = matches!(self.treated, Density::Normal { .. }) || matches!(self.control, Density::Normal { .. });
        (l1.min(l0), h1.max(h0), truncated_tails)
    }

    fn breaks(&self) -> Vec<f64> {
        let (lo, hi, _) = self.range();
        let mut width = (hi - lo) / 400.0;
        let mut knots = Vec::new();
        for d in [&self.treated, &self.control] {
            match d {
                Density::Normal { sd, .. } => width = width.min(sd / 4.0),
                Density::Tabulated { x, .. } => knots.extend_from_slice(x),
            }
        }
        let mut b = uniform_breaks(lo, hi, width);
        b.extend(knots);
        sort_dedup(&mut b);
        b
    }

    /// Points where the score crosses `level`, located by bisection on the
    /// panel grid.
    fn score_crossings(&self, grid: &[f64], level: f64) -> Vec<f64> {
        let g = |x: f64| self.mixture(x).map(|m| m.e - level);
        let mut out = Vec::new();
        for w in grid.windows(2) {
            let (Some(ga), Some(gb)) = (g(w[0]), g(w[1])) else { continue };
            if ga == 0.0 {
                out.push(w[0]);
                continue;
            }
            if ga.signum() == gb.signum() {
                continue;
            }
            let (mut a, mut b, mut fa) = (w[0], w[1], ga);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if m <= a || m >= b {
                    break;
                }
                let Some(fm) = g(m) else { break };
                if fm.signum() == fa.signum() {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                }
            }
            out.push(0.5 * (a + b));
        }
        out
    }
}

fn sort_dedup(v: &mut Vec<f64>) {
    v.sort_by(f64::total_cmp);
    v.dedup();
}

/// e(x) = q1 f1(x) / (q1 f1(x) + q0 f0(x)).
pub fn implied_propensity(spec: &ScenarioSpec, x: f64) -> Result<f64, AsymptoticsError> {
    spec.mixture(x).map(|m| m.e).ok_or(AsymptoticsError::ZeroDensity(x))
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceResult {
    pub scheme: String,
    /// Limit of N Var(tau_hat); infinite when the integral diverges.
    pub asymptotic_variance: f64,
    /// Relative to the unweighted difference of means.
    pub relative_variance: f64,
    pub quadrature_error: f64,
    pub divergence: Option<String>,
}

impl VarianceResult {
    pub fn is_divergent(&self) -> bool {
        self.divergence.is_some()
    }
}

/// Quadrature of the normalized variance for an arbitrary score tilt.
fn variance_for_tilt(
    spec: &ScenarioSpec,
    label: String,
    tilt: &(dyn Fn(f64, f64) -> f64 + Sync),
    v1: &(dyn Fn(f64) -> f64 + Sync),
    v0: &(dyn Fn(f64) -> f64 + Sync),
    score_levels: &[f64],
) -> VarianceResult {
    let mut breaks = spec.breaks();
    let mut extra = Vec::new();
    for level in score_levels {
        extra.extend(spec.score_crossings(&breaks, *level));
    }
    breaks.extend(extra);
    sort_dedup(&mut breaks);

    let numerator = |x: f64| match spec.mixture(x) {
        None => 0.0,
        Some(m) if m.f == 0.0 => 0.0,
        Some(m) => {
            let h = tilt(m.e, m.e_complement);
            if h == 0.0 {
                0.0
            } else {
                m.f * h * h * (v1(x) / m.e + v0(x) / m.e_complement)
            }
        }
    };
    let denominator = |x: f64| spec.mixture(x).map_or(0.0, |m| m.f * tilt(m.e, m.e_complement));
    let (lo, hi, tails_cut) = spec.range();
    let divergent = |reason: String| VarianceResult {
        scheme: label.clone(),
        asymptotic_variance: f64::INFINITY,
        relative_variance: f64::INFINITY,
        quadrature_error: f64::NAN,
        divergence: Some(reason),
    };
    // a convergent integrand is negligible this far into the tails
    if tails_cut {
        let edge = (numerator(lo).abs() + numerator(hi).abs()) * (hi - lo);
        if !edge.is_finite() || edge > EDGE_TOLERANCE {
            return divergent(format!("integrand not negligible at range boundary [{lo}, {hi}]"));
        }
    }
    let num = integrate(&numerator, &breaks, QUADRATURE_TOLERANCE);
    let den = integrate(&denominator, &breaks, QUADRATURE_TOLERANCE);
    let (q1, q0) = spec.fractions();
    let reference = spec.residual_variance * (1.0 / q1 + 1.0 / q0);

    if num.non_finite {
        return divergent("integrand is infinite where the score reaches 0 or 1".to_string());
    }
    if num.exhausted {
        return divergent("quadrature did not converge; integrand unbounded".to_string());
    }
    if tails_cut {
        let edge = (numerator(lo).abs() + numerator(hi).abs()) * (hi - lo);
        if edge > 1e-6 * num.value.abs() {
            return divergent(format!("integrand not negligible at range boundary [{lo}, {hi}]"));
        }
    }
    if !(den.value > 0.0) {
        return divergent("empty target population".to_string());
    }
    let value = num.value / (den.value * den.value);
    // first-order propagation of both quadrature errors
    let error = value * (num.error_estimate / num.value.abs() + 2.0 * den.error_estimate / den.value);
    VarianceResult {
        scheme: label,
        asymptotic_variance: value,
        relative_variance: value / reference,
        quadrature_error: error / reference,
        divergence: None,
    }
}

fn score_tilt(scheme: &WeightScheme) -> Result<(), AsymptoticsError> {
    scheme
        .tilt_of_score(0.5, 0.5)
        .map(|_| ())
        .ok_or_else(|| AsymptoticsError::NotScoreBased(scheme.to_string()))
}

fn truncation_levels(scheme: &WeightScheme) -> Vec<f64> {
    match scheme {
        WeightScheme::Truncated { alpha } if *alpha > 0.0 => vec![*alpha, 1.0 - alpha],
        _ => Vec::new(),
    }
}

/// Mass of the target population, the integral of `f h`; 1 for `h = 1`.
pub fn target_mass(spec: &ScenarioSpec, scheme: &WeightScheme) -> Result<f64, AsymptoticsError> {
    spec.validate()?;
    score_tilt(scheme)?;
    let mut breaks = spec.breaks();
    let extra: Vec<f64> = truncation_levels(scheme)
        .iter()
        .flat_map(|l| spec.score_crossings(&breaks, *l))
        .collect();
    breaks.extend(extra);
    sort_dedup(&mut breaks);
    let g = |x: f64| {
        spec.mixture(x)
            .map_or(0.0, |m| m.f * scheme.tilt_of_score(m.e, m.e_complement).unwrap_or(0.0))
    };
    Ok(integrate(&g, &breaks, QUADRATURE_TOLERANCE).value)
}

/// Relative variance of the scheme's estimator under homoscedasticity.
pub fn relative_variance(spec: &ScenarioSpec, scheme: &WeightScheme) -> Result<VarianceResult, AsymptoticsError> {
    spec.validate()?;
    score_tilt(scheme)?;
    let v = spec.residual_variance;
    let tilt = |e: f64, c: f64| scheme.tilt_of_score(e, c).unwrap_or(0.0);
    Ok(variance_for_tilt(
        spec,
        scheme.to_string(),
        &tilt,
        &|_| v,
        &|_| v,
        &truncation_levels(scheme),
    ))
}

/// Asymptotic variance with group-specific residual variance functions.
pub fn asymptotic_variance_heteroscedastic(
    spec: &ScenarioSpec,
    scheme: &WeightScheme,
    v1: &(dyn Fn(f64) -> f64 + Sync),
    v0: &(dyn Fn(f64) -> f64 + Sync),
) -> Result<VarianceResult, AsymptoticsError> {
    spec.validate()?;
    score_tilt(scheme)?;
    let tilt = |e: f64, c: f64| scheme.tilt_of_score(e, c).unwrap_or(0.0);
    Ok(variance_for_tilt(spec, scheme.to_string(), &tilt, v1, v0, &truncation_levels(scheme)))
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationCheck {
    pub direction: String,
    pub epsilon: f64,
    pub relative_variance: f64,
    pub overlap_relative_variance: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimalityReport {
    pub results: Vec<VarianceResult>,
    pub best: usize,
    pub best_scheme: String,
    /// `Some(true)` when overlap is among the candidates and attains the minimum.
    pub overlap_is_minimal: Option<bool>,
    pub perturbations: Vec<PerturbationCheck>,
}

impl OptimalityReport {
    pub fn perturbations_hold(&self) -> bool {
        self.perturbations.iter().all(|p| p.holds)
    }
}

/// Perturbation magnitudes used by [`optimality_scan`].
pub const PERTURBATION_EPSILONS: [f64; 2] = [-0.05, 0.05];

type Direction = (&'static str, fn(f64) -> f64);

const PERTURBATION_DIRECTIONS: [Direction; 4] = [
    ("e - 1/2", |e| e - 0.5),
    ("(e - 1/2)^2", |e| (e - 0.5) * (e - 0.5)),
    ("sin(2 pi e)", |e| (2.0 * std::f64::consts::PI * e).sin()),
    ("1", |_| 1.0),
];

/// Picks the candidate with the smallest relative variance and checks that
/// multiplicative perturbations `e(1-e)(1 + eps g(e))` of the overlap tilt
/// never do better than overlap itself.
pub fn optimality_scan(spec: &ScenarioSpec, candidates: &[WeightScheme]) -> Result<OptimalityReport, AsymptoticsError> {
    if candidates.is_empty() {
        return Err(AsymptoticsError::NoCandidates);
    }
    let results = candidates
        .par_iter()
        .map(|s| relative_variance(spec, s))
        .collect::<Result<Vec<_>, _>>()?;
    let best = results
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.relative_variance.total_cmp(&b.1.relative_variance))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let overlap = relative_variance(spec, &WeightScheme::Overlap)?;
    let overlap_is_minimal = candidates.iter().position(WeightScheme::is_overlap).map(|_| {
        results
            .iter()
            .all(|r| r.relative_variance >= overlap.relative_variance * (1.0 - 1e-9))
    });
    let v = spec.residual_variance;
    let mut jobs = Vec::new();
    for (label, g) in PERTURBATION_DIRECTIONS {
        for eps in PERTURBATION_EPSILONS {
            jobs.push((label, g, eps));
        }
    }
    let perturbations = jobs
        .par_iter()
        .map(|(label, g, eps)| {
            let tilt = move |e: f64, c: f64| e * c * (1.0 + eps * g(e));
            let r = variance_for_tilt(spec, label.to_string(), &tilt, &|_| v, &|_| v, &[]);
            PerturbationCheck {
                direction: label.to_string(),
                epsilon: *eps,
                relative_variance: r.relative_variance,
                overlap_relative_variance: overlap.relative_variance,
                holds: r.relative_variance >= overlap.relative_variance * (1.0 - 1e-8),
            }
        })
        .collect();
    Ok(OptimalityReport {
        best_scheme: results[best].scheme.clone(),
        best,
        results,
        overlap_is_minimal,
        perturbations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Fit a logistic model of treatment on x in every simulated dataset.
    #[default]
    Estimated,
    /// Use the scenario's implied propensity score.
    True,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloConfig {
    pub n_treated: usize,
    pub n_control: usize,
    pub n_sims: usize,
    pub seed: u64,
    pub effect: f64,
    pub score: ScoreSource,
}

impl MonteCarloConfig {
    /// Group sizes matching the scenario's size ratio for a total of `n_total`.
    pub fn for_total(spec: &ScenarioSpec, n_total: usize, n_sims: usize, seed: u64) -> Self {
        let n_treated = ((n_total as f64) / (1.0 + spec.size_ratio)).round().max(1.0) as usize;
        MonteCarloConfig {
            n_treated,
            n_control: n_total.saturating_sub(n_treated).max(1),
            n_sims,
            seed,
            effect: 1.0,
            score: ScoreSource::Estimated,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub scheme: String,
    pub n_total: usize,
    pub n_sims: usize,
    pub n_failed: usize,
    pub mean_estimate: f64,
    /// N times the sample variance of the estimates.
    pub empirical_n_var: f64,
    pub asymptotic_n_var: f64,
    /// empirical_n_var / asymptotic_n_var
    pub ratio: f64,
    /// Var(tau_hat) / (v (1/n1 + 1/n0)).
    pub empirical_relative_variance: f64,
}

/// Simulates `Y = effect * Z + noise` with x drawn from the scenario's group
/// densities and compares the spread of the weighted estimates with the
/// asymptotic formula.
pub fn monte_carlo_check(
    spec: &ScenarioSpec,
    scheme: &WeightScheme,
    config: &MonteCarloConfig,
) -> Result<MonteCarloReport, AsymptoticsError> {
    spec.validate()?;
    let asymptotic = relative_variance(spec, scheme)?;
    let noise = Normal::new(0.0, spec.residual_variance.sqrt())
        .map_err(|e| AsymptoticsError::InvalidScenario(e.to_string()))?;
    let fit_options = FitOptions::default();
    let n = config.n_treated + config.n_control;
    let estimates: Vec<Option<f64>> = (0..config.n_sims)
        .into_par_iter()
        .map(|sim| {
            let mut rng = replicate_rng(config.seed, sim);
            let mut x = Vec::with_capacity(n);
            let mut z = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let treated = i < config.n_treated;
                let density = if treated { &spec.treated } else { &spec.control };
                x.push(density.sample(&mut rng));
                z.push(treated);
                y.push(if treated { config.effect } else { 0.0 } + noise.sample(&mut rng));
            }
            let data = Dataset::new(z, Some(y), vec![("x".to_string(), x.clone())], None).ok()?;
            let model = match config.score {
                ScoreSource::Estimated => fit(&data, &fit_options).ok()?,
                ScoreSource::True => {
                    let e = x
                        .iter()
                        .map(|v| implied_propensity(spec, *v))
                        .collect::<Result<Vec<_>, _>>()
                        .ok()?;
                    PropensityModel::from_scores(e).ok()?
                }
            };
            let weights = compute(&model, &data, scheme).ok()?;
            wate(&data, &weights).ok()
        })
        .collect();
    let ok: Vec<f64> = estimates.iter().flatten().copied().collect();
    let n_failed = config.n_sims - ok.len();
    if n_failed > 0 {
        log::warn!("{n_failed} of {} simulations failed", config.n_sims);
    }
    let m = ok.iter().sum::<f64>() / ok.len() as f64;
    let var = ok.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / (ok.len() as f64 - 1.0);
    let empirical_n_var = n as f64 * var;
    let reference = spec.residual_variance * (1.0 / config.n_treated as f64 + 1.0 / config.n_control as f64);
    Ok(MonteCarloReport {
        scheme: scheme.to_string(),
        n_total: n,
        n_sims: config.n_sims,
        n_failed,
        mean_estimate: m,
        empirical_n_var,
        asymptotic_n_var: asymptotic.asymptotic_variance * spec.residual_variance,
        ratio: empirical_n_var / (asymptotic.asymptotic_variance * spec.residual_variance),
        empirical_relative_variance: var / reference,
    })
}

/// Optional Monte Carlo settings in a scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloSettings {
    pub n_total: usize,
    pub n_sims: usize,
    pub seed: u64,
    #[serde(default)]
    pub score: ScoreSource,
}

/// Declarative list of scenarios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(rename = "scenario")]
    pub scenarios: Vec<ScenarioSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloSettings>,
}

impl ScenarioFile {
    pub fn from_toml_str(text: &str) -> Result<Self, AsymptoticsError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| AsymptoticsError::Parse(e.to_string()))?;
        for s in &file.scenarios {
            s.validate()?;
        }
        Ok(file)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, AsymptoticsError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn implied_propensity_examples() {
        let same = ScenarioSpec::new("same", Density::normal(0.0, 1.0), Density::normal(0.0, 1.0), 1.0).unwrap();
        for x in [-3.0, 0.0, 2.5] {
            assert!((implied_propensity(&same, x).unwrap() - 0.5).abs() < 1e-15);
        }
        let shifted = ScenarioSpec::new("s", Density::normal(0.0, 1.0), Density::normal(1.0, 1.0), 1.0).unwrap();
        assert!((implied_propensity(&shifted, 0.5).unwrap() - 0.5).abs() < 1e-15);
        let unequal = ScenarioSpec::new("u", Density::normal(0.0, 1.0), Density::normal(1.0, 1.0), 20.0).unwrap();
        assert!((implied_propensity(&unequal, 0.5).unwrap() - 1.0 / 21.0).abs() < 1e-15);
    }

    #[test]
    fn zero_density_is_an_error() {
        let tab = |a: f64| Density::Tabulated {
            x: vec![a, a + 1.0],
            density: vec![1.0, 1.0],
        };
        let s = ScenarioSpec::new("gap", tab(0.0), tab(2.0), 1.0).unwrap();
        assert!(matches!(implied_propensity(&s, 1.5), Err(AsymptoticsError::ZeroDensity(_))));
    }

    #[test]
    fn density_validation() {
        assert!(ScenarioSpec::new("bad", Density::normal(0.0, -1.0), Density::normal(0.0, 1.0), 1.0).is_err());
        let unnormalized = Density::Tabulated {
            x: vec![0.0, 1.0],
            density: vec![2.0, 2.0],
        };
        assert!(ScenarioSpec::new("bad", unnormalized, Density::normal(0.0, 1.0), 1.0).is_err());
        assert!(ScenarioSpec::new("bad", Density::normal(0.0, 1.0), Density::normal(0.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn tabulated_sampling_matches_mean() {
        // triangular density on [0, 2] peaking at 2: mean 4/3
        let d = Density::Tabulated {
            x: vec![0.0, 2.0],
            density: vec![0.0, 1.0],
        };
        let mut rng = replicate_rng(7, 0);
        let n = 200_000;
        let m: f64 = (0..n).map(|_| d.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((m - 4.0 / 3.0).abs() < 0.01, "{m}");
    }

    #[test]
    fn unweighted_scheme_is_not_score_based() {
        let s = ScenarioSpec::new("s", Density::normal(0.0, 1.0), Density::normal(1.0, 1.0), 1.0).unwrap();
        assert!(matches!(
            relative_variance(&s, &WeightScheme::Unweighted),
            Err(AsymptoticsError::NotScoreBased(_))
        ));
        assert!(matches!(optimality_scan(&s, &[]), Err(AsymptoticsError::NoCandidates)));
    }

    #[test]
    fn unequal_spread_sd_ten() {
        let s = ScenarioSpec::new("sd10", Density::normal(0.0, 1.0), Density::normal(0.0, 10.0), 1.0).unwrap();
        let rv = |scheme| relative_variance(&s, &scheme).unwrap();
        let truncated = rv(WeightScheme::Truncated { alpha: 0.1 });
        let overlap = rv(WeightScheme::Overlap);
        assert!((truncated.relative_variance - 4.546).abs() < 1e-3, "{}", truncated.relative_variance);
        assert!((overlap.relative_variance - 3.165).abs() < 1e-3, "{}", overlap.relative_variance);
        assert!(rv(WeightScheme::Combined).is_divergent());
    }

    #[test]
    fn scenario_file_parses() {
        let f = ScenarioFile::from_toml_str(
            r#"
[[scenario]]
name = "(1)"
size_ratio = 1
treated = { type = "normal", mean = 0, sd = 1 }
control = { type = "normal", mean = 1, sd = 1 }
schemes = ["ht", "truncated(0.1)", "overlap"]

[monte_carlo]
n_total = 200
n_sims = 10
seed = 3
"#,
        )
        .unwrap();
        assert_eq!(f.scenarios.len(), 1);
        assert_eq!(f.scenarios[0].schemes.len(), 3);
        assert_eq!(f.monte_carlo.unwrap().n_sims, 10);
    }
}
