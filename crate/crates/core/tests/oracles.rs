//! Worked examples checked against values computed independently in the
//! test itself (hand arithmetic, brute-force search or simulation).

mod common;

use common::{logistic, normal, rng};
use psweight::asymptotics::{
    monte_carlo_check, relative_variance, target_mass, Density, MonteCarloConfig, ScenarioSpec,
};
use psweight::balance::overlap_mean_gaps;
use psweight::estimate::{effect_by_decile, fixed_effects_oracle};
use psweight::propensity::{calibrate, fit_saturated, variance_inflation_preview};
use psweight::{
    bootstrap_se, compute, fit, verify_exact_balance, wate, BootstrapConfig, Dataset, FitOptions, PropensityModel,
    WeightScheme, WeightedSample,
};
use rand::Rng;

fn one_covariate(z: &[u8], x: &[f64], y: Option<Vec<f64>>) -> Dataset {
    Dataset::new(
        z.iter().map(|v| *v == 1).collect(),
        y,
        vec![("x".into(), x.to_vec())],
        None,
    )
    .unwrap()
}

fn loglik(b0: f64, b1: f64, x: &[f64], z: &[u8]) -> f64 {
    x.iter()
        .zip(z)
        .map(|(xi, zi)| {
            let p = logistic(b0 + b1 * xi);
            if *zi == 1 { p.ln() } else { (1.0 - p).ln() }
        })
        .sum()
}

#[test]
fn eight_unit_fit_matches_grid_search() {
    let x = [0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0];
    let z = [0u8, 1, 0, 1, 0, 0, 1, 1];
    let model = fit(&one_covariate(&z, &x, None), &FitOptions::default()).unwrap();

    // Shrinking grid around the best point; the log-likelihood is concave.
    let (mut b0, mut b1, mut step) = (0.0f64, 0.0f64, 1.0f64);
    while step > 1e-9 {
        let mut best = (loglik(b0, b1, &x, &z), b0, b1);
        for i in -10..=10 {
            for j in -10..=10 {
                let (c0, c1) = (b0 + i as f64 * step, b1 + j as f64 * step);
                let l = loglik(c0, c1, &x, &z);
                if l > best.0 {
                    best = (l, c0, c1);
                }
            }
        }
        if best.1 == b0 && best.2 == b1 {
            step /= 4.0;
        }
        b0 = best.1;
        b1 = best.2;
    }
    for (xi, e) in x.iter().zip(model.scores()) {
        assert!((logistic(b0 + b1 * xi) - e).abs() < 1e-6);
    }
    assert!(verify_exact_balance(&model, &one_covariate(&z, &x, None)).unwrap() < 1e-8);
}

#[test]
fn six_unit_overlap_estimate_by_hand() {
    let e = vec![0.2, 0.5, 0.7, 0.4, 0.6, 0.3];
    let data = one_covariate(
        &[1, 1, 1, 0, 0, 0],
        &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        Some(vec![3.0, 5.0, 4.0, 1.0, 2.0, 2.0]),
    );
    let model = PropensityModel::from_scores(e).unwrap();
    let w = compute(&model, &data, &WeightScheme::Overlap).unwrap();
    // treated weights 0.8, 0.5, 0.3; control weights 0.4, 0.6, 0.3
    let expected = (0.8 * 3.0 + 0.5 * 5.0 + 0.3 * 4.0) / 1.6 - (0.4 * 1.0 + 0.6 * 2.0 + 0.3 * 2.0) / 1.3;
    assert!((wate(&data, &w).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn two_point_design_fixed_effects_and_saturated_overlap() {
    // point A: controls 1, 2; treated 4, 6. point B: control 3; treated 5, 6, 7
    let data = one_covariate(
        &[0, 0, 1, 1, 0, 1, 1, 1],
        &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        Some(vec![1.0, 2.0, 4.0, 6.0, 3.0, 5.0, 6.0, 7.0]),
    );
    // within-point differences 3.5 and 3, weights n1 n0 / n = 1 and 0.75
    let expected = (1.0 * 3.5 + 0.75 * 3.0) / 1.75;
    let fe = fixed_effects_oracle(&data).unwrap();
    assert!((fe.tau_hat - expected).abs() < 1e-12);
    let model = fit_saturated(&data).unwrap();
    let w = compute(&model, &data, &WeightScheme::Overlap).unwrap();
    assert!((wate(&data, &w).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn early_stopped_fit_is_not_balanced() {
    let mut r = rng(5);
    let n = 300;
    let x: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
    let z: Vec<u8> = x
        .iter()
        .map(|v| (r.random::<f64>() < logistic(0.3 + 1.5 * v)) as u8)
        .collect();
    let data = one_covariate(&z, &x, None);

    // Two plain Newton steps from zero.
    let (mut b0, mut b1) = (0.0f64, 0.0f64);
    for _ in 0..2 {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (xi, zi) in x.iter().zip(&z) {
            let p = logistic(b0 + b1 * xi);
            let r = *zi as f64 - p;
            let v = p * (1.0 - p);
            g0 += r;
            g1 += r * xi;
            h00 += v;
            h01 += v * xi;
            h11 += v * xi * xi;
        }
        let det = h00 * h11 - h01 * h01;
        b0 += (h11 * g0 - h01 * g1) / det;
        b1 += (h00 * g1 - h01 * g0) / det;
    }
    let early = PropensityModel::from_scores(x.iter().map(|v| logistic(b0 + b1 * v)).collect()).unwrap();
    let gap = overlap_mean_gaps(&early, &data).unwrap()[0].1;
    assert!(gap > 1e-8, "gap {gap}");

    let full = fit(&data, &FitOptions::default()).unwrap();
    assert!(verify_exact_balance(&full, &data).unwrap() < 1e-8);
}

#[test]
fn calibration_separates_correct_and_wrong_models() {
    let mut r = rng(17);
    let n = 10_000;
    let x: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
    let z: Vec<bool> = x.iter().map(|v| r.random::<f64>() < logistic(-1.0 + 1.5 * v * v)).collect();
    let band = 3.0 * (0.25f64 / 1000.0).sqrt();

    let right = Dataset::new(z.clone(), None, vec![("x2".into(), x.iter().map(|v| v * v).collect())], None).unwrap();
    let model = fit(&right, &FitOptions::default()).unwrap();
    let report = calibrate(&model, &right, 10).unwrap();
    assert!(report.max_abs_gap < band, "{}", report.max_abs_gap);

    // Linear in x misses the U shape.
    let wrong = Dataset::new(z, None, vec![("x".into(), x)], None).unwrap();
    let model = fit(&wrong, &FitOptions::default()).unwrap();
    let report = calibrate(&model, &wrong, 10).unwrap();
    assert!(report.max_abs_gap > band, "{}", report.max_abs_gap);
}

fn sample(treated: &[bool], raw: &[f64]) -> WeightedSample {
    WeightedSample::from_raw(WeightScheme::Unweighted, treated.to_vec(), raw.to_vec(), Vec::new()).unwrap()
}

#[test]
fn variance_inflation_examples() {
    let t = [true, true, true, false, false, false];
    // treated: (4 + 1 + 0) / 9 = 5/9; control 1/3; scaled by 3/2
    let vif = variance_inflation_preview(&sample(&t, &[2.0, 1.0, 0.0, 1.0, 1.0, 1.0])).unwrap();
    assert!((vif - 4.0 / 3.0).abs() < 1e-12);

    let constant = variance_inflation_preview(&sample(&t, &[0.7; 6])).unwrap();
    assert!((constant - 1.0).abs() < 1e-12);

    // One treated unit carries nearly all the weight: (1/10 + 1/10)^-1 (1 + 1/10).
    let mut t = vec![true; 10];
    t.extend(vec![false; 10]);
    let mut w = vec![1e9];
    w.extend(vec![1.0; 19]);
    let vif = variance_inflation_preview(&sample(&t, &w)).unwrap();
    assert!((vif - 5.5).abs() < 1e-6, "{vif}");
}

#[test]
fn constant_outcome_has_zero_bootstrap_se() {
    let data = common::synthetic(3, 150, 2);
    let data = data.with_outcome(vec![2.5; 150]).unwrap();
    let report = bootstrap_se(&data, &WeightScheme::Overlap, &BootstrapConfig::new(50, 1)).unwrap();
    assert!((report.tau_hat).abs() < 1e-12);
    assert!(report.se_bootstrap < 1e-12);
}

#[test]
fn bootstrap_se_tracks_sampling_sd() {
    let n = 200;
    let scheme = WeightScheme::Overlap;
    let estimates: Vec<f64> = (0..2000u64)
        .filter_map(|s| {
            let d = common::synthetic(10_000 + s, n, 2);
            let m = fit(&d, &FitOptions::default()).ok()?;
            wate(&d, &compute(&m, &d, &scheme).ok()?).ok()
        })
        .collect();
    assert!(estimates.len() > 1900);
    let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
    let sd = (estimates.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (estimates.len() as f64 - 1.0)).sqrt();

    let data = common::synthetic(10_000, n, 2);
    let report = bootstrap_se(&data, &scheme, &BootstrapConfig::new(2000, 99)).unwrap();
    let rel = (report.se_bootstrap - sd).abs() / sd;
    assert!(rel < 0.15, "bootstrap {} vs sampling sd {sd}", report.se_bootstrap);
}

#[test]
fn decile_effects_rise_with_the_score() {
    let mut r = rng(23);
    let n = 5000;
    let x: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
    let z: Vec<bool> = x.iter().map(|v| r.random::<f64>() < logistic(*v)).collect();
    // effect 1 + x grows with x, and so does the score
    let y: Vec<f64> = x
        .iter()
        .zip(&z)
        .map(|(v, t)| v + if *t { 1.0 + v } else { 0.0 } + 0.1 * normal(&mut r))
        .collect();
    let data = Dataset::new(z, Some(y), vec![("x".into(), x)], None).unwrap();
    let model = fit(&data, &FitOptions::default()).unwrap();
    let deciles = effect_by_decile(&data, &model, &WeightScheme::Overlap).unwrap();
    let taus: Vec<f64> = deciles.iter().filter_map(|d| d.tau_hat).collect();
    assert_eq!(taus.len(), 10);
    assert!(taus.windows(2).all(|p| p[1] > p[0]), "{taus:?}");
}

#[test]
fn identical_groups_simulate_at_the_asymptotic_variance() {
    let spec = ScenarioSpec::new("same", Density::normal(0.0, 1.0), Density::normal(0.0, 1.0), 1.0).unwrap();
    let asym = relative_variance(&spec, &WeightScheme::Overlap).unwrap();
    assert!((asym.relative_variance - 1.0).abs() < 1e-8);
    let config = MonteCarloConfig::for_total(&spec, 2000, 1000, 4);
    let mc = monte_carlo_check(&spec, &WeightScheme::Overlap, &config).unwrap();
    assert!((mc.ratio - 1.0).abs() < 0.1, "ratio {}", mc.ratio);
}

#[test]
fn weaker_overlap_inflates_ht_more_than_overlap() {
    let specs = ScenarioSpec::reference_scenarios();
    let ht = |s: &ScenarioSpec| relative_variance(s, &WeightScheme::Combined).unwrap().relative_variance;
    let ov = relative_variance(&specs[1], &WeightScheme::Overlap).unwrap().relative_variance;
    assert!(ht(&specs[1]) > ht(&specs[0]));
    assert!(ht(&specs[1]) / ov >= 3.0);

    let config = MonteCarloConfig::for_total(&specs[1], 1000, 500, 8);
    let mc_ht = monte_carlo_check(&specs[1], &WeightScheme::Combined, &config).unwrap();
    let mc_ov = monte_carlo_check(&specs[1], &WeightScheme::Overlap, &config).unwrap();
    assert!(mc_ht.empirical_relative_variance / mc_ov.empirical_relative_variance >= 3.0);
}

#[test]
fn horvitz_thompson_target_has_unit_mass() {
    for spec in ScenarioSpec::reference_scenarios() {
        let m = target_mass(&spec, &WeightScheme::Combined).unwrap();
        assert!((m - 1.0).abs() < 1e-8, "{} {m}", spec.name);
    }
}
