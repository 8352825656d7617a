//! Acceptance checks. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

mod common;

use std::time::{Duration, Instant};

use psweight::asymptotics::{
    monte_carlo_check, optimality_scan, relative_variance, Density, MonteCarloConfig, ScenarioSpec,
};
use psweight::balance::verify_exact_balance;
use psweight::estimate::{bootstrap_se, fixed_effects_oracle, wate, BootstrapConfig};
use psweight::propensity::{fit, fit_saturated, variance_inflation_preview, FitError, FitOptions};
use psweight::weights::{compute, WeightScheme, WeightedSample};
use psweight::Dataset;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn candidates() -> Vec<WeightScheme> {
    vec![
        WeightScheme::Combined,
        WeightScheme::Treated,
        WeightScheme::Control,
        WeightScheme::Truncated { alpha: 0.1 },
        WeightScheme::Overlap,
    ]
}

/// Published relative variances: HT, truncated HT (0.1), overlap.
const TABLE: [(&str, [f64; 3]); 4] = [
    ("(1)", [1.43, 1.36, 1.26]),
    ("(2)", [11.81, 2.88, 2.22]),
    ("(3)", [2.48, 3.31, 1.06]),
    ("(4)", [50.02, 4.55, 3.16]),
];

fn within_table_tolerance(got: f64, want: f64) -> bool {
    (got - want).abs() <= 0.02 || ((got - want) / want).abs() <= 0.02
}

fn table_reproduction() -> Outcome {
    let start = Instant::now();
    let schemes = [WeightScheme::Combined, WeightScheme::Truncated { alpha: 0.1 }, WeightScheme::Overlap];
    let mut misses = Vec::new();
    for (spec, (name, row)) in ScenarioSpec::reference_scenarios().iter().zip(TABLE) {
        assert_eq!(spec.name, name);
        for (scheme, want) in schemes.iter().zip(row) {
            let got = relative_variance(spec, scheme).expect("score-based scheme").relative_variance;
            let ok = within_table_tolerance(got, want);
            println!("    {name} {scheme:<15} expected {want:>6.2}  got {got:>9.4}  {}", if ok { "ok" } else { "MISS" });
            if !ok {
                misses.push(format!("{name} {scheme}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let fast = elapsed < Duration::from_secs(60);
    outcome(
        misses.is_empty() && fast,
        format!(
            "{}/12 cells within tolerance, {:.2}s{}",
            12 - misses.len(),
            elapsed.as_secs_f64(),
            if misses.is_empty() { String::new() } else { format!("; off: {}", misses.join(", ")) }
        ),
    )
}

/// 100 random datasets with N in [50, 500] and K in [1, 10]. Draws where
/// the logistic MLE does not exist (separation) are replaced and counted.
fn balance_suite() -> (Vec<(Dataset, psweight::PropensityModel)>, usize) {
    let mut r = common::rng(2024);
    let mut out = Vec::new();
    let mut seed = 0u64;
    let mut redrawn = 0;
    while out.len() < 100 {
        seed += 1;
        let n = r.random_range(50..=500);
        let k = r.random_range(1..=10);
        let d = common::synthetic(seed, n, k);
        match fit(&d, &FitOptions::default()) {
            Ok(m) => out.push((d, m)),
            Err(FitError::Separation(_)) | Err(FitError::RankDeficient { .. }) => redrawn += 1,
            Err(e) => panic!("fit failed on dataset {seed}: {e}"),
        }
    }
    (out, redrawn)
}

fn exact_balance(suite: &[(Dataset, psweight::PropensityModel)], redrawn: usize, elapsed_fit: Duration) -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (d, m) in suite {
        worst = worst.max(verify_exact_balance(m, d).expect("model covariates present"));
    }
    let elapsed = elapsed_fit + start.elapsed();
    outcome(
        worst < 1e-8 && elapsed < Duration::from_secs(30),
        format!(
            "max sd-scaled gap {worst:.2e} over {} datasets ({redrawn} redrawn without an MLE), {:.2}s",
            suite.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn score_equations(suite: &[(Dataset, psweight::PropensityModel)]) -> Outcome {
    let mut worst = 0.0f64;
    for (d, m) in suite {
        let e = m.scores();
        let z: Vec<f64> = d.treatment().iter().map(|t| *t as u8 as f64).collect();
        let n = d.n_units() as f64;
        let intercept: f64 = z.iter().zip(e).map(|(z, e)| z - e).sum();
        let mut r = intercept.abs();
        for name in m.covariate_names() {
            let x = d.covariate(name).unwrap();
            let s: f64 = x.iter().zip(&z).zip(e).map(|((x, z), e)| x * (z - e)).sum();
            r = r.max(s.abs());
        }
        worst = worst.max(r / n);
    }
    outcome(worst < 1e-8, format!("max residual / N = {worst:.2e}"))
}

fn fixed_effects() -> Outcome {
    let mut worst = 0.0f64;
    let mut seed = 100;
    let mut done = 0;
    while done < 20 {
        seed += 1;
        let n = 60 + (seed as usize * 37) % 300;
        let d = common::discrete_design(seed, n);
        let Ok(fe) = fixed_effects_oracle(&d) else { continue };
        if fe.excluded_points > 0 {
            continue;
        }
        let m = fit_saturated(&d).expect("every point has both groups");
        let w = compute(&m, &d, &WeightScheme::Overlap).unwrap();
        let tau = wate(&d, &w).unwrap();
        worst = worst.max((tau - fe.tau_hat).abs());
        done += 1;
    }
    outcome(worst < 1e-10, format!("max |overlap - fixed effects| = {worst:.2e} over 20 designs"))
}

fn optimality() -> Outcome {
    let mut scenarios = ScenarioSpec::reference_scenarios();
    let mut r = common::rng(77);
    for i in 0..10 {
        let spec = ScenarioSpec::new(
            format!("random{i}"),
            Density::normal(0.0, r.random_range(0.5..2.0)),
            Density::normal(r.random_range(-2.0..2.0), r.random_range(0.5..2.0)),
            r.random_range(0.2..5.0),
        )
        .unwrap();
        scenarios.push(spec);
    }
    let mut failures = Vec::new();
    for s in &scenarios {
        let rep = optimality_scan(s, &candidates()).unwrap();
        if rep.overlap_is_minimal != Some(true) || !rep.results[rep.best].scheme.eq("overlap") {
            failures.push(format!("{}: best {}", s.name, rep.best_scheme));
        }
        for p in rep.perturbations.iter().filter(|p| !p.holds) {
            failures.push(format!("{}: g={} eps={}", s.name, p.direction, p.epsilon));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{} scenarios, overlap minimal and 8 perturbations each{}",
            scenarios.len(),
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

fn monte_carlo() -> Outcome {
    let start = Instant::now();
    let spec = &ScenarioSpec::reference_scenarios()[0];
    let cfg = MonteCarloConfig::for_total(spec, 2000, 1000, 11);
    let rep = monte_carlo_check(spec, &WeightScheme::Overlap, &cfg).unwrap();
    let elapsed = start.elapsed();
    outcome(
        (0.85..=1.15).contains(&rep.ratio) && elapsed < Duration::from_secs(300) && rep.n_failed == 0,
        format!(
            "N Var empirical {:.4} vs asymptotic {:.4}, ratio {:.3}, {} failed sims, {:.1}s",
            rep.empirical_n_var,
            rep.asymptotic_n_var,
            rep.ratio,
            rep.n_failed,
            elapsed.as_secs_f64()
        ),
    )
}

fn sample(treated: Vec<bool>, raw: Vec<f64>) -> WeightedSample {
    WeightedSample::from_raw(WeightScheme::Unweighted, treated, raw, vec![]).unwrap()
}

fn design_effect() -> Outcome {
    let z = vec![true, true, true, true, false, false, false, false];
    let constant = variance_inflation_preview(&sample(z.clone(), vec![2.5; 8])).unwrap();
    let example = variance_inflation_preview(&sample(z, vec![1.0, 1.0, 1.0, 3.0, 1.0, 1.0, 1.0, 3.0])).unwrap();
    let mut r = common::rng(5);
    let mut min_random = f64::INFINITY;
    for _ in 0..500 {
        let n = r.random_range(4..60);
        let treated: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.001..10.0)).collect();
        min_random = min_random.min(variance_inflation_preview(&sample(treated, raw)).unwrap());
    }
    let pass = (constant - 1.0).abs() < 1e-12 && (example - 4.0 / 3.0).abs() < 1e-12 && min_random >= 1.0;
    outcome(
        pass,
        format!("constant {constant}, (1,1,1,3) example {example:.15}, min over 500 random {min_random:.4}"),
    )
}

fn properties() -> Outcome {
    let mut failures = Vec::new();
    let mut r = common::rng(31);
    for case in 0..40u64 {
        let n = r.random_range(50..300);
        let k = r.random_range(1..6);
        let d = common::synthetic(1000 + case, n, k);
        let Ok(m) = fit(&d, &FitOptions::default()) else { continue };
        let w = compute(&m, &d, &WeightScheme::Overlap).unwrap();
        if w.raw().iter().any(|v| !(0.0..=1.0).contains(v)) {
            failures.push(format!("case {case}: overlap weight outside [0,1]"));
        }
        for scheme in candidates() {
            let Ok(ws) = compute(&m, &d, &scheme) else { continue };
            for g in [true, false] {
                let s: f64 = ws.normalized().iter().zip(d.treatment()).filter(|(_, t)| **t == g).map(|(v, _)| v).sum();
                if (s - 1.0).abs() > 1e-12 {
                    failures.push(format!("case {case}: {scheme} normalized sum {s}"));
                }
            }
        }
        let tau = wate(&d, &w).unwrap();
        let (a, c) = (r.random_range(0.1..10.0), r.random_range(-100.0..100.0));
        let y: Vec<f64> = d.outcome().unwrap().iter().map(|v| a * v + c).collect();
        let shifted = d.with_outcome(y).unwrap();
        let tau2 = wate(&shifted, &w).unwrap();
        if (tau2 - a * tau).abs() > 1e-12 * (1.0 + c.abs() + a * tau.abs()) * 10.0 {
            failures.push(format!("case {case}: affine outcome {tau2} vs {}", a * tau));
        }
        if case % 10 == 0 {
            let cfg = BootstrapConfig::new(50, case);
            let b1 = bootstrap_se(&d, &WeightScheme::Overlap, &cfg).unwrap();
            let b2 = bootstrap_se(&d, &WeightScheme::Overlap, &cfg).unwrap();
            if b1.se_bootstrap.to_bits() != b2.se_bootstrap.to_bits() {
                failures.push(format!("case {case}: bootstrap not deterministic"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "weight bounds, normalization, affine invariance, bootstrap determinism on 40 datasets".to_string()
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let mut results = Vec::new();
    let mut report = |id: usize, name: &str, o: Outcome| {
        println!("criterion {id} [{name}]: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push(o.pass);
    };
    report(1, "relative-variance table", table_reproduction());
    let start = Instant::now();
    let (suite, redrawn) = balance_suite();
    let fit_time = start.elapsed();
    report(2, "exact mean balance", exact_balance(&suite, redrawn, fit_time));
    report(3, "score equations", score_equations(&suite));
    report(4, "fixed-effects equivalence", fixed_effects());
    report(5, "overlap optimality", optimality());
    report(6, "Monte Carlo variance", monte_carlo());
    report(7, "design effect", design_effect());
    report(8, "property suite", properties());
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
