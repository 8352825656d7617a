//! Weighted average treatment effect, bootstrap standard errors, per-decile
//! effects and the fixed-effects regression used as an equivalence check.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Group};
use crate::propensity::{design_points, fit, variance_inflation_preview, FitError, FitOptions, PropensityModel};
use crate::stats::{quantile_bins, sample_sd, weighted_mean};
use crate::weights::{combine_sampling_weights, compute, raw_weights, WeightError, WeightScheme, WeightedSample};

/// Largest fraction of bootstrap replicates that may fail before the
/// standard error is refused.
pub const MAX_DISCARD_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("dataset has no outcome column")]
    MissingOutcome,
    #[error("empty target population: {0} group has zero total weight")]
    EmptyTargetPopulation(Group),
    #[error("need at least 2 bootstrap replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("{discarded} of {replicates} bootstrap replicates failed (limit {:.0}%)", MAX_DISCARD_FRACTION * 100.0)]
    TooManyFailures { discarded: usize, replicates: usize },
    #[error("no design point has both groups")]
    NoEstimablePoints,
    #[error("normal equations are singular")]
    Singular,
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Weights(WeightError),
}

impl From<WeightError> for EstimateError {
    fn from(e: WeightError) -> Self {
        match e {
            WeightError::EmptyTargetPopulation(g) => EstimateError::EmptyTargetPopulation(g),
            other => EstimateError::Weights(other),
        }
    }
}

/// Difference of weighted group means of the outcome.
pub fn wate(data: &Dataset, weights: &WeightedSample) -> Result<f64, EstimateError> {
    let y = data.outcome().ok_or(EstimateError::MissingOutcome)?;
    if weights.len() != y.len() {
        return Err(EstimateError::Shape(format!("{} weights for {} units", weights.len(), y.len())));
    }
    wate_raw(y, data.treatment(), weights.raw())
}

fn wate_raw(y: &[f64], z: &[bool], w: &[f64]) -> Result<f64, EstimateError> {
    let group_mean = |g: bool| {
        weighted_mean(
            y.iter()
                .zip(z)
                .zip(w)
                .filter(|((_, t), w)| **t == g && **w > 0.0)
                .map(|((y, _), w)| (*y, *w)),
        )
    };
    let treated = group_mean(true).ok_or(EstimateError::EmptyTargetPopulation(Group::Treated))?;
    let control = group_mean(false).ok_or(EstimateError::EmptyTargetPopulation(Group::Control))?;
    Ok(treated - control)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    /// Refit the propensity model and recompute weights in each replicate.
    #[default]
    Refit,
    /// Reuse the full-sample weights; faster but ignores score estimation.
    FixedWeights,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Resample within treatment groups instead of over all units.
    pub stratified: bool,
    pub mode: BootstrapMode,
    pub keep_draws: bool,
    #[serde(skip)]
    pub fit_options: FitOptions,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        BootstrapConfig {
            replicates,
            seed,
            stratified: false,
            mode: BootstrapMode::Refit,
            keep_draws: false,
            fit_options: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DecileEstimate {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub tau_hat: Option<f64>,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub scheme: WeightScheme,
    pub tau_hat: f64,
    pub se_bootstrap: f64,
    pub n_replicates: usize,
    pub n_discarded: usize,
    pub seed: u64,
    pub mode: BootstrapMode,
    pub stratified: bool,
    pub variance_inflation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_decile: Option<Vec<DecileEstimate>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<Vec<f64>>,
}

/// RNG for one replicate: a ChaCha stream selected by replicate index, so
/// results do not depend on scheduling.
pub(crate) fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn resample_indices(rng: &mut ChaCha8Rng, treatment: &[bool], stratified: bool) -> Vec<usize> {
    let n = treatment.len();
    if !stratified {
        return (0..n).map(|_| rng.random_range(0..n)).collect();
    }
    let mut out = Vec::with_capacity(n);
    for group in [true, false] {
        let members: Vec<usize> = (0..n).filter(|i| treatment[*i] == group).collect();
        out.extend((0..members.len()).map(|_| members[rng.random_range(0..members.len())]));
    }
    out
}

fn point_estimate(
    data: &Dataset,
    scheme: &WeightScheme,
    options: &FitOptions,
) -> Result<(PropensityModel, WeightedSample, f64), EstimateError> {
    let model = fit(data, options)?;
    let mut weights = compute(&model, data, scheme)?;
    if data.sampling_weights().is_some() {
        weights = combine_sampling_weights(&weights, data)?;
    }
    let tau = wate(data, &weights)?;
    Ok((model, weights, tau))
}

/// Point estimate plus a nonparametric bootstrap standard error. Each
/// replicate resamples units with replacement and, in refit mode, refits
/// the propensity model before recomputing the weights and the estimate.
pub fn bootstrap_se(
    data: &Dataset,
    scheme: &WeightScheme,
    config: &BootstrapConfig,
) -> Result<EstimateReport, EstimateError> {
    if config.replicates < 2 {
        return Err(EstimateError::TooFewReplicates(config.replicates));
    }
    let y = data.outcome().ok_or(EstimateError::MissingOutcome)?;
    let (model, weights, tau_hat) = point_estimate(data, scheme, &config.fit_options)?;
    let variance_inflation = variance_inflation_preview(&weights)?;

    let draws: Vec<Option<f64>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(config.seed, r);
            let idx = resample_indices(&mut rng, data.treatment(), config.stratified);
            match config.mode {
                BootstrapMode::Refit => {
                    let sample = data.resample(&idx).ok()?;
                    point_estimate(&sample, scheme, &config.fit_options).ok().map(|r| r.2)
                }
                BootstrapMode::FixedWeights => {
                    let yb: Vec<f64> = idx.iter().map(|i| y[*i]).collect();
                    let zb: Vec<bool> = idx.iter().map(|i| data.treatment()[*i]).collect();
                    let wb: Vec<f64> = idx.iter().map(|i| weights.raw()[*i]).collect();
                    wate_raw(&yb, &zb, &wb).ok()
                }
            }
        })
        .collect();
    let ok: Vec<f64> = draws.iter().flatten().copied().collect();
    let discarded = config.replicates - ok.len();
    if discarded as f64 > MAX_DISCARD_FRACTION * config.replicates as f64 || ok.len() < 2 {
        return Err(EstimateError::TooManyFailures {
            discarded,
            replicates: config.replicates,
        });
    }
    if discarded > 0 {
        log::warn!("{discarded} of {} bootstrap replicates discarded", config.replicates);
    }
    let per_decile = effect_by_decile(data, &model, scheme).ok();
    Ok(EstimateReport {
        scheme: scheme.clone(),
        tau_hat,
        se_bootstrap: sample_sd(&ok),
        n_replicates: config.replicates,
        n_discarded: discarded,
        seed: config.seed,
        mode: config.mode,
        stratified: config.stratified,
        variance_inflation,
        per_decile,
        draws: config.keep_draws.then_some(ok),
    })
}

/// Effect estimates within deciles of the estimated score, using the
/// scheme's weights restricted to each decile. Deciles lacking one group
/// or any positive weight are flagged rather than estimated.
pub fn effect_by_decile(
    data: &Dataset,
    model: &PropensityModel,
    scheme: &WeightScheme,
) -> Result<Vec<DecileEstimate>, EstimateError> {
    let y = data.outcome().ok_or(EstimateError::MissingOutcome)?;
    let w = raw_weights(model, data, scheme)?;
    let bins = quantile_bins(model.scores(), 10);
    let z = data.treatment();
    Ok((0..bins.n_bins())
        .map(|b| {
            let members: Vec<usize> = (0..y.len()).filter(|i| bins.assignment[*i] == b).collect();
            let n_treated = members.iter().filter(|i| z[**i]).count();
            let n_control = members.len() - n_treated;
            let (tau_hat, flag) = if n_treated == 0 || n_control == 0 {
                let only = if n_treated == 0 { "control" } else { "treated" };
                (None, Some(format!("not estimable: only {only} units")))
            } else {
                let yb: Vec<f64> = members.iter().map(|i| y[*i]).collect();
                let zb: Vec<bool> = members.iter().map(|i| z[*i]).collect();
                let wb: Vec<f64> = members.iter().map(|i| w[*i]).collect();
                match wate_raw(&yb, &zb, &wb) {
                    Ok(t) => (Some(t), None),
                    Err(_) => (None, Some("not estimable: empty target population".to_string())),
                }
            };
            DecileEstimate {
                bin: b + 1,
                lower: bins.edges[b],
                upper: bins.edges[b + 1],
                n_treated,
                n_control,
                tau_hat,
                flag,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedEffectsFit {
    pub tau_hat: f64,
    pub n_points: usize,
    /// Design points dropped because only one group was observed there.
    pub excluded_points: usize,
}

/// OLS of `y = alpha_point + tau * z + error` with one intercept per
/// distinct covariate row, solved from the normal equations.
pub fn fixed_effects_oracle(data: &Dataset) -> Result<FixedEffectsFit, EstimateError> {
    let y = data.outcome().ok_or(EstimateError::MissingOutcome)?;
    let z = data.treatment();
    let (assignment, n_points) = design_points(data);
    let mut counts = vec![[0usize; 2]; n_points];
    for (i, p) in assignment.iter().enumerate() {
        counts[*p][z[i] as usize] += 1;
    }
    let kept: Vec<usize> = (0..n_points).filter(|p| counts[*p][0] > 0 && counts[*p][1] > 0).collect();
    let excluded_points = n_points - kept.len();
    if excluded_points > 0 {
        log::warn!("{excluded_points} design points have a single group and are excluded");
    }
    if kept.is_empty() {
        return Err(EstimateError::NoEstimablePoints);
    }
    let mut column_of = vec![None; n_points];
    for (c, p) in kept.iter().enumerate() {
        column_of[*p] = Some(c);
    }
    let m = kept.len();
    // parameters: alpha_0..alpha_{m-1}, tau
    let mut xtx = DMatrix::<f64>::zeros(m + 1, m + 1);
    let mut xty = DVector::<f64>::zeros(m + 1);
    for i in 0..y.len() {
        let Some(c) = column_of[assignment[i]] else { continue };
        let zi = if z[i] { 1.0 } else { 0.0 };
        xtx[(c, c)] += 1.0;
        xtx[(c, m)] += zi;
        xtx[(m, c)] += zi;
        xtx[(m, m)] += zi * zi;
        xty[c] += y[i];
        xty[m] += zi * y[i];
    }
    let beta = xtx.lu().solve(&xty).ok_or(EstimateError::Singular)?;
    Ok(FixedEffectsFit {
        tau_hat: beta[m],
        n_points,
        excluded_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_outcome(z: Vec<bool>, y: Vec<f64>, x: Vec<f64>) -> Dataset {
        Dataset::new(z, Some(y), vec![("x".into(), x)], None).unwrap()
    }

    fn unit(d: &Dataset) -> WeightedSample {
        WeightedSample::from_raw(WeightScheme::Unweighted, d.treatment().to_vec(), vec![1.0; d.n_units()], vec![])
            .unwrap()
    }

    #[test]
    fn difference_of_means() {
        let d = with_outcome(
            vec![true, true, false, false],
            vec![3.0, 5.0, 1.0, 1.0],
            vec![0.0, 1.0, 0.0, 1.0],
        );
        assert_eq!(wate(&d, &unit(&d)).unwrap(), 3.0);
    }

    #[test]
    fn constant_outcome_gives_zero() {
        let d = with_outcome(
            vec![true, true, false, false, true],
            vec![0.7; 5],
            vec![0.0, 1.0, 0.0, 1.0, 2.0],
        );
        let w = WeightedSample::from_raw(
            WeightScheme::Overlap,
            d.treatment().to_vec(),
            vec![0.3, 0.11, 0.9, 0.47, 0.05],
            vec![],
        )
        .unwrap();
        assert_eq!(wate(&d, &w).unwrap(), 0.0);
    }

    #[test]
    fn missing_outcome() {
        let d = Dataset::new(vec![true, false], None, vec![], None).unwrap();
        assert!(matches!(wate(&d, &unit(&d)), Err(EstimateError::MissingOutcome)));
    }

    #[test]
    fn fixed_effects_single_point() {
        let d = with_outcome(
            vec![true, true, false, false, false],
            vec![4.0, 6.0, 1.0, 2.0, 3.0],
            vec![1.0; 5],
        );
        let fe = fixed_effects_oracle(&d).unwrap();
        assert!((fe.tau_hat - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_effects_excludes_single_group_points() {
        let d = with_outcome(
            vec![true, false, true, true],
            vec![2.0, 1.0, 9.0, 7.0],
            vec![0.0, 0.0, 1.0, 1.0],
        );
        let fe = fixed_effects_oracle(&d).unwrap();
        assert_eq!(fe.excluded_points, 1);
        assert!((fe.tau_hat - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decile_with_one_group_is_flagged() {
        let n = 40;
        let scores: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        // top decile all treated, the rest alternate
        let z: Vec<bool> = (0..n).map(|i| i >= 36 || i % 2 == 0).collect();
        let y: Vec<f64> = z.iter().map(|t| if *t { 2.0 } else { 0.0 }).collect();
        let d = Dataset::new(z, Some(y), vec![], None).unwrap();
        let m = PropensityModel::from_scores(scores).unwrap();
        let dec = effect_by_decile(&d, &m, &WeightScheme::Overlap).unwrap();
        assert_eq!(dec.len(), 10);
        assert_eq!(dec.iter().map(|d| d.n_treated + d.n_control).sum::<usize>(), n);
        assert!(dec[9].tau_hat.is_none());
        assert!(dec[9].flag.as_deref().unwrap().contains("only treated"));
        for d in &dec[..9] {
            assert!((d.tau_hat.unwrap() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_replicates() {
        let d = with_outcome(vec![true, false, true, false], vec![1.0; 4], vec![0.0, 1.0, 1.0, 0.0]);
        let err = bootstrap_se(&d, &WeightScheme::Overlap, &BootstrapConfig::new(1, 1)).unwrap_err();
        assert!(matches!(err, EstimateError::TooFewReplicates(1)));
    }
}
