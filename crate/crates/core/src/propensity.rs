//! Logistic propensity-score estimation and calibration checks.
//!
//! The fit is a Newton-Raphson (IRLS) solve of the binomial likelihood on a
//! standardized design with step halving. Tolerances are tight on purpose:
//! exact mean balance under overlap weights holds only at the exact MLE.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{DataError, Dataset, Group};
use crate::stats::{logistic, logit, quantile_bins, softplus};
use crate::weights::{WeightError, WeightedSample};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("design matrix is rank deficient (rank {rank} of {columns} columns)")]
    RankDeficient { rank: usize, columns: usize },
    #[error("no convergence after {iterations} iterations (max score residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("separation detected: {}", .0.separation.as_deref().unwrap_or("fitted probabilities reached 0 or 1"))]
    Separation(Box<PropensityModel>),
    #[error("covariate mismatch: {0}")]
    CovariateMismatch(String),
    #[error("design point {point} has units from only one group")]
    SingleGroupPoint { point: usize },
    #[error("score {value} at unit {unit} is outside (0, 1)")]
    InvalidScore { unit: usize, value: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Solver settings. Defaults follow the tight tolerances needed for exact balance.
#[derive(Debug, Clone, Serialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Convergence when max |score residual| < `score_tolerance * N`.
    pub score_tolerance: f64,
    /// Relative change in log-likelihood treated as a floating-point floor.
    pub loglik_tolerance: f64,
    /// Separation is declared when ||beta|| on the standardized scale exceeds this.
    pub separation_bound: f64,
    /// |linear predictor| beyond which a fitted probability counts as 0 or 1.
    pub separation_eta: f64,
    /// Optional ridge penalty on the standardized slopes. Breaks the score
    /// equations, so exact balance no longer holds.
    pub ridge: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 100,
            score_tolerance: 1e-10,
            loglik_tolerance: 1e-12,
            separation_bound: 1e4,
            separation_eta: 30.0,
            ridge: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Saturated,
    Supplied,
}

/// A fitted (or supplied) propensity model and its per-unit scores.
#[derive(Debug, Clone, Serialize)]
pub struct PropensityModel {
    kind: ModelKind,
    covariate_names: Vec<String>,
    /// Intercept first, then one slope per covariate, on the original scale.
    coefficients: Vec<f64>,
    linear_predictor: Vec<f64>,
    scores: Vec<f64>,
    converged: bool,
    iterations: usize,
    max_score_residual: f64,
    log_likelihood: f64,
    null_log_likelihood: f64,
    dropped_columns: Vec<String>,
    penalized: bool,
    separation: Option<String>,
}

impl PropensityModel {
    /// Wraps externally estimated scores, e.g. from a multinomial model.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self, FitError> {
        if let Some((unit, value)) = scores.iter().enumerate().find(|(_, e)| !(**e > 0.0 && **e < 1.0)) {
            return Err(FitError::InvalidScore { unit, value: *value });
        }
        Ok(PropensityModel {
            kind: ModelKind::Supplied,
            covariate_names: Vec::new(),
            coefficients: Vec::new(),
            linear_predictor: scores.iter().map(|e| logit(*e)).collect(),
            scores,
            converged: true,
            iterations: 0,
            max_score_residual: f64::NAN,
            log_likelihood: f64::NAN,
            null_log_likelihood: f64::NAN,
            dropped_columns: Vec::new(),
            penalized: false,
            separation: None,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
    pub fn linear_predictor(&self) -> &[f64] {
        &self.linear_predictor
    }
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
    pub fn converged(&self) -> bool {
        self.converged
    }
    pub fn iterations(&self) -> usize {
        self.iterations
    }
    pub fn max_score_residual(&self) -> f64 {
        self.max_score_residual
    }
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }
    pub fn null_log_likelihood(&self) -> f64 {
        self.null_log_likelihood
    }
    pub fn dropped_columns(&self) -> &[String] {
        &self.dropped_columns
    }
    pub fn penalized(&self) -> bool {
        self.penalized
    }
    pub fn separation(&self) -> Option<&str> {
        self.separation.as_deref()
    }
    pub fn n_units(&self) -> usize {
        self.scores.len()
    }
}

/// Standardized design: intercept column plus centered and scaled covariates.
struct Design {
    x: DMatrix<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl Design {
    fn new(data: &Dataset) -> Self {
        let n = data.n_units();
        let k = data.n_covariates();
        let mut means = Vec::with_capacity(k);
        let mut scales = Vec::with_capacity(k);
        for col in data.columns() {
            let m = col.iter().sum::<f64>() / n as f64;
            let s = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
            means.push(m);
            scales.push(if s > 0.0 { s } else { 1.0 });
        }
        let x = DMatrix::from_fn(n, k + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                (data.column(j - 1)[i] - means[j - 1]) / scales[j - 1]
            }
        });
        Design { x, means, scales }
    }

    fn rank(&self) -> usize {
        let sv = self.x.clone().svd(false, false).singular_values;
        let max = sv.max();
        sv.iter().filter(|s| **s > max * 1e-10).count()
    }

    /// Original-scale coefficients from standardized ones.
    fn unscale(&self, beta: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; beta.len()];
        let mut intercept = beta[0];
        for j in 1..beta.len() {
            out[j] = beta[j] / self.scales[j - 1];
            intercept -= beta[j] * self.means[j - 1] / self.scales[j - 1];
        }
        out[0] = intercept;
        out
    }
}

fn log_likelihood(eta: &DVector<f64>, z: &[f64]) -> f64 {
    eta.iter().zip(z).map(|(e, zi)| zi * e - softplus(*e)).sum()
}

fn original_scale_fit(
    data: &Dataset,
    coefficients: &[f64],
    z: &[f64],
) -> (Vec<f64>, Vec<f64>, f64) {
    let n = data.n_units();
    let eta: Vec<f64> = (0..n)
        .map(|i| {
            coefficients[0]
                + data
                    .columns()
                    .iter()
                    .zip(&coefficients[1..])
                    .map(|(c, b)| c[i] * b)
                    .sum::<f64>()
        })
        .collect();
    let scores: Vec<f64> = eta.iter().map(|e| logistic(*e)).collect();
    let resid: Vec<f64> = z.iter().zip(&scores).map(|(zi, e)| zi - e).collect();
    let mut max = resid.iter().sum::<f64>().abs();
    for col in data.columns() {
        let r: f64 = col.iter().zip(&resid).map(|(x, r)| x * r).sum();
        max = max.max(r.abs());
    }
    (eta, scores, max)
}

/// Maximum-likelihood logistic regression of treatment on all covariates of
/// `data` (plus an intercept). Constant columns are dropped with a warning.
pub fn fit(data: &Dataset, options: &FitOptions) -> Result<PropensityModel, FitError> {
    let constant = data.constant_columns();
    let dropped_columns: Vec<String> = constant
        .iter()
        .map(|k| data.covariate_names()[*k].clone())
        .collect();
    for name in &dropped_columns {
        log::warn!("dropping constant covariate '{name}' before fitting");
    }
    let data = &data.without_columns(&constant);
    let n = data.n_units();
    let design = Design::new(data);
    let p = design.x.ncols();
    let rank = design.rank();
    if n < p || rank < p {
        return Err(FitError::RankDeficient { rank, columns: p });
    }
    let z: Vec<f64> = data.treatment().iter().map(|t| if *t { 1.0 } else { 0.0 }).collect();
    let zv = DVector::from_column_slice(&z);
    let ridge = options.ridge.unwrap_or(0.0);
    let null_ll = -(n as f64) * std::f64::consts::LN_2;

    let penalized_ll = |beta: &DVector<f64>, eta: &DVector<f64>| {
        let pen: f64 = beta.iter().skip(1).map(|b| b * b).sum();
        log_likelihood(eta, &z) - 0.5 * ridge * pen
    };

    let mut beta = DVector::zeros(p);
    beta[0] = logit(data.n_treated() as f64 / n as f64);
    let mut eta = &design.x * &beta;
    let mut ll = penalized_ll(&beta, &eta);
    let tol = options.score_tolerance * n as f64;
    let mut iterations = 0;
    let mut converged = false;
    let mut flat_steps = 0;
    let mut separation = None;

    while iterations < options.max_iterations {
        let probs = eta.map(logistic);
        let mut grad = design.x.tr_mul(&(&zv - &probs));
        for j in 1..p {
            grad[j] -= ridge * beta[j];
        }
        if grad.amax() < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let w = probs.map(|e| e * (1.0 - e));
        let mut xw = design.x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let mut hess = design.x.tr_mul(&xw);
        for j in 1..p {
            hess[(j, j)] += ridge;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => match hess.lu().solve(&grad) {
                Some(s) => s,
                None => {
                    separation = Some("information matrix became singular".to_string());
                    break;
                }
            },
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let cand_eta = &design.x * &cand;
            let cand_ll = penalized_ll(&cand, &cand_eta);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs() {
                accepted = Some((cand, cand_eta, cand_ll));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_eta, cand_ll)) = accepted else {
            // no ascent direction left at machine precision
            converged = grad.amax() < tol.max(1e-6 * n as f64);
            break;
        };
        let rel = (cand_ll - ll).abs() / ll.abs().max(1e-300);
        beta = cand;
        eta = cand_eta;
        ll = cand_ll;
        if beta.norm() > options.separation_bound {
            separation = Some(format!(
                "coefficient norm {:.3e} exceeded bound {:.1e}",
                beta.norm(),
                options.separation_bound
            ));
            break;
        }
        if rel < options.loglik_tolerance {
            flat_steps += 1;
            if flat_steps >= 2 {
                converged = true;
                break;
            }
        } else {
            flat_steps = 0;
        }
    }

    let coefficients = design.unscale(&beta);
    let (linear_predictor, scores, max_score_residual) = original_scale_fit(data, &coefficients, &z);
    let log_likelihood = log_likelihood(&DVector::from_column_slice(&linear_predictor), &z);
    if separation.is_none() {
        let extreme = linear_predictor
            .iter()
            .filter(|e| e.abs() > options.separation_eta)
            .count();
        if extreme > 0 {
            separation = Some(format!(
                "{extreme} fitted probabilities within machine precision of 0 or 1"
            ));
        }
    }
    let model = PropensityModel {
        kind: ModelKind::Logistic,
        covariate_names: data.covariate_names().to_vec(),
        coefficients,
        linear_predictor,
        scores,
        converged,
        iterations,
        max_score_residual,
        log_likelihood,
        null_log_likelihood: null_ll,
        dropped_columns,
        penalized: options.ridge.is_some(),
        separation,
    };
    if model.separation.is_some() {
        return Err(FitError::Separation(Box::new(model)));
    }
    if !converged {
        return Err(FitError::NotConverged {
            iterations,
            residual: max_score_residual,
        });
    }
    Ok(model)
}

/// Key for grouping identical covariate rows.
pub(crate) fn design_points(data: &Dataset) -> (Vec<usize>, usize) {
    let mut index: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let mut assignment = Vec::with_capacity(data.n_units());
    for i in 0..data.n_units() {
        let key: Vec<u64> = data.row(i).iter().map(|v| (v + 0.0).to_bits()).collect();
        let next = index.len();
        assignment.push(*index.entry(key).or_insert(next));
    }
    (assignment, index.len())
}

/// Saturated propensity model: one indicator per distinct covariate row, so
/// each unit's score is the treated fraction at its design point.
pub fn fit_saturated(data: &Dataset) -> Result<PropensityModel, FitError> {
    let (assignment, n_points) = design_points(data);
    let mut counts = vec![(0usize, 0usize); n_points];
    for (i, p) in assignment.iter().enumerate() {
        if data.treatment()[i] {
            counts[*p].1 += 1;
        } else {
            counts[*p].0 += 1;
        }
    }
    if let Some(point) = counts.iter().position(|(n0, n1)| *n0 == 0 || *n1 == 0) {
        return Err(FitError::SingleGroupPoint { point });
    }
    let scores: Vec<f64> = assignment
        .iter()
        .map(|p| {
            let (n0, n1) = counts[*p];
            n1 as f64 / (n0 + n1) as f64
        })
        .collect();
    let z: Vec<f64> = data.treatment().iter().map(|t| if *t { 1.0 } else { 0.0 }).collect();
    let eta: Vec<f64> = scores.iter().map(|e| logit(*e)).collect();
    let ll = log_likelihood(&DVector::from_column_slice(&eta), &z);
    Ok(PropensityModel {
        kind: ModelKind::Saturated,
        covariate_names: data.covariate_names().to_vec(),
        coefficients: Vec::new(),
        linear_predictor: eta,
        scores,
        converged: true,
        iterations: 0,
        max_score_residual: 0.0,
        log_likelihood: ll,
        null_log_likelihood: -(data.n_units() as f64) * std::f64::consts::LN_2,
        dropped_columns: Vec::new(),
        penalized: false,
        separation: None,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
    pub mean_predicted: f64,
    pub observed_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub max_abs_gap: f64,
    /// Tied scores forced fewer bins than requested.
    pub merged: bool,
}

/// Compares mean predicted score with the observed treated fraction within
/// quantile bins of the score.
pub fn calibrate(model: &PropensityModel, data: &Dataset, n_bins: usize) -> Result<CalibrationReport, FitError> {
    if model.n_units() != data.n_units() {
        return Err(FitError::CovariateMismatch(format!(
            "model has {} units, data has {}",
            model.n_units(),
            data.n_units()
        )));
    }
    let n_bins = n_bins.max(2);
    let qb = quantile_bins(model.scores(), n_bins);
    if qb.merged {
        log::warn!("only {} distinct score bins available (requested {n_bins})", qb.n_bins());
    }
    let mut acc = vec![(0usize, 0.0f64, 0usize); qb.n_bins()];
    for (i, b) in qb.assignment.iter().enumerate() {
        acc[*b].0 += 1;
        acc[*b].1 += model.scores()[i];
        acc[*b].2 += data.treatment()[i] as usize;
    }
    let bins: Vec<CalibrationBin> = acc
        .iter()
        .enumerate()
        .map(|(j, (n, s, t))| CalibrationBin {
            lower: qb.edges[j],
            upper: qb.edges[j + 1],
            n: *n,
            mean_predicted: if *n > 0 { s / *n as f64 } else { f64::NAN },
            observed_fraction: if *n > 0 { *t as f64 / *n as f64 } else { f64::NAN },
        })
        .collect();
    let max_abs_gap = bins
        .iter()
        .filter(|b| b.n > 0)
        .map(|b| (b.mean_predicted - b.observed_fraction).abs())
        .fold(0.0, f64::max);
    Ok(CalibrationReport {
        bins,
        max_abs_gap,
        merged: qb.merged,
    })
}

/// Refits after adding indicator columns for the score bins of a trial
/// model (bins 2..=n_bins; the first bin is the reference).
pub fn refit_with_bin_indicators(
    data: &Dataset,
    trial: &PropensityModel,
    n_bins: usize,
    options: &FitOptions,
) -> Result<(Dataset, PropensityModel), FitError> {
    let qb = quantile_bins(trial.scores(), n_bins.max(2));
    let mut augmented = data.clone();
    for b in 1..qb.n_bins() {
        let col = qb.assignment.iter().map(|a| if *a == b { 1.0 } else { 0.0 }).collect();
        augmented = augmented.with_column(format!("score_bin_{}", b + 1), col)?;
    }
    let model = fit(&augmented, options)?;
    Ok((augmented, model))
}

/// Homoscedastic variance inflation of a weighted difference of means
/// relative to the unweighted one (Kish design effect summed over groups).
pub fn variance_inflation_preview(weights: &WeightedSample) -> Result<f64, WeightError> {
    let mut n = [0usize; 2];
    let mut sum = [0.0f64; 2];
    let mut sum_sq = [0.0f64; 2];
    for (t, w) in weights.treated().iter().zip(weights.raw()) {
        let g = *t as usize;
        n[g] += 1;
        sum[g] += w;
        sum_sq[g] += w * w;
    }
    for (g, group) in [(1, Group::Treated), (0, Group::Control)] {
        if !(sum[g] > 0.0) {
            return Err(WeightError::EmptyTargetPopulation(group));
        }
    }
    let harmonic = 1.0 / (1.0 / n[1] as f64 + 1.0 / n[0] as f64);
    Ok(harmonic * (sum_sq[1] / (sum[1] * sum[1]) + sum_sq[0] / (sum[0] * sum[0])))
}
