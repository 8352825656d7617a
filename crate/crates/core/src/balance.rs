//! Covariate balance diagnostics: absolute standardized bias, the exact
//! mean-balance check for overlap weights, and weighted distribution
//! summaries for plotting.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::propensity::PropensityModel;
use crate::stats::{mean, sample_sd, sample_variance, weighted_mean, weighted_quantile};
use crate::weights::WeightedSample;

/// Maximum sd-scaled mean gap accepted as exact balance at a converged MLE
/// (100 times the per-unit score tolerance of the solver).
pub const EXACT_BALANCE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("no covariates to assess")]
    NoCovariates,
    #[error("covariate '{0}' is constant in both groups")]
    ConstantCovariate(String),
    #[error("covariate mismatch: {0}")]
    Mismatch(String),
    #[error("a group has zero total weight")]
    ZeroWeight,
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct CovariateBalance {
    pub name: String,
    pub mean_treated: f64,
    pub mean_control: f64,
    pub weighted_mean_treated: f64,
    pub weighted_mean_control: f64,
    pub var_treated: f64,
    pub var_control: f64,
    pub asb: f64,
    /// Whether the covariate entered the propensity model; only those are
    /// guaranteed exact mean balance under overlap weights.
    pub in_model: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub scheme: String,
    pub covariates: Vec<CovariateBalance>,
    pub max_asb: f64,
    pub median_asb: f64,
}

fn split<'a>(values: &'a [f64], treated: &'a [bool]) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::new();
    let mut c = Vec::new();
    for (v, z) in values.iter().zip(treated) {
        if *z {
            t.push(*v);
        } else {
            c.push(*v);
        }
    }
    (t, c)
}

fn weighted_group_mean(values: &[f64], treated: &[bool], w: &[f64], group: bool) -> Option<f64> {
    weighted_mean(
        values
            .iter()
            .zip(treated)
            .zip(w)
            .filter(|((_, z), _)| **z == group)
            .map(|((v, _), w)| (*v, *w)),
    )
}

/// Absolute standardized bias for every covariate: the weighted mean
/// difference over the unweighted two-sample standard error
/// `sqrt(s1^2/N1 + s0^2/N0)`.
pub fn asb(data: &Dataset, weights: &WeightedSample) -> Result<BalanceReport, BalanceError> {
    if data.n_covariates() == 0 {
        return Err(BalanceError::NoCovariates);
    }
    if weights.len() != data.n_units() {
        return Err(BalanceError::Mismatch(format!(
            "{} weights for {} units",
            weights.len(),
            data.n_units()
        )));
    }
    let z = data.treatment();
    let w = weights.raw();
    let n1 = data.n_treated() as f64;
    let n0 = data.n_control() as f64;
    let covariates = data
        .covariate_names()
        .par_iter()
        .zip(data.columns().par_iter())
        .map(|(name, x)| {
            let (xt, xc) = split(x, z);
            let var_treated = sample_variance(&xt);
            let var_control = sample_variance(&xc);
            let se = (var_treated / n1 + var_control / n0).sqrt();
            if !(se > 0.0) {
                return Err(BalanceError::ConstantCovariate(name.clone()));
            }
            let wt = weighted_group_mean(x, z, w, true).ok_or(BalanceError::ZeroWeight)?;
            let wc = weighted_group_mean(x, z, w, false).ok_or(BalanceError::ZeroWeight)?;
            Ok(CovariateBalance {
                name: name.clone(),
                mean_treated: mean(&xt),
                mean_control: mean(&xc),
                weighted_mean_treated: wt,
                weighted_mean_control: wc,
                var_treated,
                var_control,
                asb: (wt - wc).abs() / se,
                in_model: weights.model_covariates().contains(name),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut sorted: Vec<f64> = covariates.iter().map(|c| c.asb).collect();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median_asb = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    Ok(BalanceReport {
        scheme: weights.scheme().to_string(),
        max_asb: sorted[m - 1],
        median_asb,
        covariates,
    })
}

/// Sd-scaled gap between overlap-weighted group means for every covariate
/// in `data`, using the model's scores. Constant covariates report zero.
pub fn overlap_mean_gaps(model: &PropensityModel, data: &Dataset) -> Result<Vec<(String, f64)>, BalanceError> {
    if model.n_units() != data.n_units() {
        return Err(BalanceError::Mismatch(format!(
            "model has {} units, data has {}",
            model.n_units(),
            data.n_units()
        )));
    }
    let z = data.treatment();
    let overlap: Vec<f64> = z
        .iter()
        .zip(model.scores())
        .map(|(t, e)| if *t { 1.0 - e } else { *e })
        .collect();
    data.covariate_names()
        .iter()
        .zip(data.columns())
        .map(|(name, x)| {
            let sd = sample_sd(x);
            if !(sd > 0.0) {
                return Ok((name.clone(), 0.0));
            }
            let lhs = weighted_group_mean(x, z, &overlap, true).ok_or(BalanceError::ZeroWeight)?;
            let rhs = weighted_group_mean(x, z, &overlap, false).ok_or(BalanceError::ZeroWeight)?;
            Ok((name.clone(), (lhs - rhs).abs() / sd))
        })
        .collect()
}

/// Largest sd-scaled gap between the overlap-weighted covariate means of
/// the two groups, over the covariates in the model. At a converged
/// logistic MLE this is zero up to rounding.
pub fn verify_exact_balance(model: &PropensityModel, data: &Dataset) -> Result<f64, BalanceError> {
    if let Some(name) = model.covariate_names().iter().find(|n| data.covariate(n).is_none()) {
        return Err(BalanceError::Mismatch(format!("model covariate '{name}' not in data")));
    }
    Ok(overlap_mean_gaps(model, data)?
        .into_iter()
        .filter(|(name, _)| model.covariate_names().contains(name))
        .map(|(_, gap)| gap)
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupDistribution {
    /// Normalized weight mass per bin; sums to one.
    pub mass: Vec<f64>,
    /// Weighted quantiles at [`QUANTILE_LEVELS`].
    pub quantiles: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CovariateDistribution {
    pub name: String,
    pub edges: Vec<f64>,
    pub treated: GroupDistribution,
    pub control: GroupDistribution,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistributionSummary {
    pub scheme: String,
    pub covariates: Vec<CovariateDistribution>,
}

pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Freedman-Diaconis bin count for the pooled values, at least 2.
pub fn freedman_diaconis_bins(values: &[f64]) -> usize {
    let ones = vec![1.0; values.len()];
    let q = |p| weighted_quantile(values, &ones, p).unwrap_or(0.0);
    let iqr = q(0.75) - q(0.25);
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if !(iqr > 0.0) || !(hi > lo) {
        return 2;
    }
    let width = 2.0 * iqr / (values.len() as f64).cbrt();
    (((hi - lo) / width).ceil() as usize).clamp(2, 1000)
}

/// Weighted histograms on a grid shared by both groups, plus weighted
/// quantiles, per covariate.
pub fn weighted_distributions(
    data: &Dataset,
    weights: &WeightedSample,
    bins: usize,
) -> Result<DistributionSummary, BalanceError> {
    if bins < 2 {
        return Err(BalanceError::TooFewBins(bins));
    }
    let z = data.treatment();
    let w = weights.normalized();
    let covariates = data
        .covariate_names()
        .iter()
        .zip(data.columns())
        .map(|(name, x)| {
            let (lo, hi) = x
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
            let width = (hi - lo) / bins as f64;
            let edges: Vec<f64> = (0..=bins).map(|j| lo + width * j as f64).collect();
            let bin_of = |v: f64| (((v - lo) / width).floor() as usize).min(bins - 1);
            let summarize = |group: bool| {
                let mut mass = vec![0.0; bins];
                let mut vals = Vec::new();
                let mut ws = Vec::new();
                for ((v, t), wi) in x.iter().zip(z).zip(w) {
                    if *t == group {
                        mass[bin_of(*v)] += wi;
                        vals.push(*v);
                        ws.push(*wi);
                    }
                }
                let quantiles = QUANTILE_LEVELS
                    .iter()
                    .map(|p| weighted_quantile(&vals, &ws, *p).unwrap_or(f64::NAN))
                    .collect();
                GroupDistribution { mass, quantiles }
            };
            CovariateDistribution {
                name: name.clone(),
                edges,
                treated: summarize(true),
                control: summarize(false),
            }
        })
        .collect();
    Ok(DistributionSummary {
        scheme: weights.scheme().to_string(),
        covariates,
    })
}
