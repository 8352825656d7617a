use serde::Serialize;

use crate::asymptotics::{
    monte_carlo_check, optimality_scan, relative_variance, MonteCarloConfig, MonteCarloReport, MonteCarloSettings,
    OptimalityReport, ScenarioFile,
};
use crate::balance::{asb, weighted_distributions, BalanceReport, DistributionSummary, QUANTILE_LEVELS};
use crate::dataset::{load, Dataset};
use crate::estimate::{bootstrap_se, effect_by_decile, wate, BootstrapConfig, EstimateError, EstimateReport};
use crate::propensity::{calibrate, fit, variance_inflation_preview, CalibrationReport, FitError, FitOptions, PropensityModel};
use crate::weights::{combine_sampling_weights, compute, WeightError, WeightScheme, WeightedSample};

use super::config::{file_label, parse_scheme, AnalysisConfig, DEFAULT_ALPHA};
use super::{num, CliError, SimulateArgs, Staging};

pub const EMPTY_TARGET: &str = "empty target population";
const MC_DEFAULT_TOTAL: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Fit,
    Analyze,
    Balance,
    Weights,
}

#[derive(Serialize)]
struct ModelFile<'a> {
    config: &'a AnalysisConfig,
    model: &'a PropensityModel,
    calibration: &'a CalibrationReport,
}

#[derive(Serialize)]
struct EstimateFile<'a> {
    config: &'a AnalysisConfig,
    scheme: String,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimate: Option<&'a EstimateReport>,
}

#[derive(Serialize, Clone)]
struct ComparisonRow {
    scheme: String,
    estimate: Option<f64>,
    se: Option<f64>,
    variance_inflation: Option<f64>,
    max_asb: Option<f64>,
    status: String,
}

#[derive(Serialize)]
struct AnalysisFile<'a> {
    config: &'a AnalysisConfig,
    comparison: &'a [ComparisonRow],
}

fn fit_model(data: &Dataset, kind: Kind) -> Result<PropensityModel, CliError> {
    match fit(data, &FitOptions::default()) {
        Ok(m) => Ok(m),
        // the fit report itself is the place to surface separation
        Err(FitError::Separation(m)) if kind == Kind::Fit => {
            log::warn!("{}", m.separation().unwrap_or("separation"));
            Ok(*m)
        }
        Err(e) => Err(e.into()),
    }
}

fn weights_for(model: &PropensityModel, data: &Dataset, scheme: &WeightScheme) -> Result<Option<WeightedSample>, CliError> {
    let w = match compute(model, data, scheme) {
        Ok(w) => w,
        Err(WeightError::EmptyTargetPopulation(g)) => {
            log::warn!("{scheme}: {EMPTY_TARGET} ({g} group)");
            return Ok(None);
        }
        Err(e) => return Err(e.into()),
    };
    if data.sampling_weights().is_some() {
        return Ok(Some(combine_sampling_weights(&w, data)?));
    }
    Ok(Some(w))
}

pub fn run_analysis(kind: Kind, config: &AnalysisConfig, staging: &mut Staging) -> Result<(), CliError> {
    let data = load(&config.data, &config.ingest)?;
    if kind == Kind::Analyze && data.outcome().is_none() {
        return Err(CliError::Config("analyze needs an outcome column in the ingest schema".into()));
    }
    let model = fit_model(&data, kind)?;
    if matches!(kind, Kind::Fit | Kind::Analyze) {
        let calibration = calibrate(&model, &data, config.report.calibration_bins)?;
        staging.write_json(
            "model.json",
            &ModelFile {
                config,
                model: &model,
                calibration: &calibration,
            },
        )?;
        write_calibration(staging, &calibration)?;
    }
    if kind == Kind::Fit {
        return Ok(());
    }

    let schemes = config.weight_schemes()?;
    let mut comparison = Vec::new();
    let mut exported = Vec::new();
    for scheme in &schemes {
        let label = file_label(scheme);
        let weights = weights_for(&model, &data, scheme)?;
        if kind == Kind::Weights {
            exported.push((label, weights));
            continue;
        }
        let Some(weights) = weights else {
            comparison.push(ComparisonRow {
                scheme: scheme.to_string(),
                estimate: None,
                se: None,
                variance_inflation: None,
                max_asb: None,
                status: EMPTY_TARGET.into(),
            });
            if kind == Kind::Analyze {
                staging.write_json(
                    &format!("estimate_{label}.json"),
                    &EstimateFile {
                        config,
                        scheme: scheme.to_string(),
                        status: EMPTY_TARGET.into(),
                        estimate: None,
                    },
                )?;
            }
            continue;
        };
        let balance = asb(&data, &weights)?;
        write_balance(staging, &label, &balance)?;
        let dist = weighted_distributions(&data, &weights, config.report.histogram_bins)?;
        write_distributions(staging, &label, &dist)?;
        if kind == Kind::Balance {
            continue;
        }
        let (report, status) = match estimate(config, &data, &model, scheme, &weights) {
            Ok(r) => (Some(r), "ok".to_string()),
            Err(EstimateError::EmptyTargetPopulation(_)) => (None, EMPTY_TARGET.to_string()),
            Err(e) => return Err(e.into()),
        };
        staging.write_json(
            &format!("estimate_{label}.json"),
            &EstimateFile {
                config,
                scheme: scheme.to_string(),
                status: status.clone(),
                estimate: report.as_ref(),
            },
        )?;
        comparison.push(ComparisonRow {
            scheme: scheme.to_string(),
            estimate: report.as_ref().map(|r| r.tau_hat),
            se: report.as_ref().map(|r| r.se_bootstrap).filter(|s| s.is_finite()),
            variance_inflation: report.as_ref().map(|r| r.variance_inflation),
            max_asb: Some(balance.max_asb),
            status,
        });
    }
    match kind {
        Kind::Weights => write_weights(staging, &data, &model, &exported),
        Kind::Analyze => {
            let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
            let rows: Vec<Vec<String>> = comparison
                .iter()
                .map(|r| {
                    vec![
                        r.scheme.clone(),
                        opt(r.estimate),
                        opt(r.se),
                        opt(r.variance_inflation),
                        opt(r.max_asb),
                        r.status.clone(),
                    ]
                })
                .collect();
            staging.write_csv(
                "comparison.csv",
                &["scheme", "estimate", "se", "variance_inflation", "max_asb", "status"],
                &rows,
            )?;
            staging.write_json(
                "analysis.json",
                &AnalysisFile {
                    config,
                    comparison: &comparison,
                },
            )
        }
        _ => Ok(()),
    }
}

/// Point estimate with a bootstrap SE when configured, otherwise the
/// point estimate alone.
fn estimate(
    config: &AnalysisConfig,
    data: &Dataset,
    model: &PropensityModel,
    scheme: &WeightScheme,
    weights: &WeightedSample,
) -> Result<EstimateReport, EstimateError> {
    if let Some((replicates, seed)) = config.bootstrap_seed() {
        let b = config.bootstrap.as_ref().expect("bootstrap settings present");
        let mut bc = BootstrapConfig::new(replicates, seed);
        bc.stratified = b.stratified;
        bc.mode = b.mode;
        return bootstrap_se(data, scheme, &bc);
    }
    Ok(EstimateReport {
        scheme: scheme.clone(),
        tau_hat: wate(data, weights)?,
        se_bootstrap: f64::NAN,
        n_replicates: 0,
        n_discarded: 0,
        seed: 0,
        mode: Default::default(),
        stratified: false,
        variance_inflation: variance_inflation_preview(weights)?,
        per_decile: effect_by_decile(data, model, scheme).ok(),
        draws: None,
    })
}

fn write_calibration(staging: &mut Staging, c: &CalibrationReport) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = c
        .bins
        .iter()
        .enumerate()
        .map(|(j, b)| {
            vec![
                (j + 1).to_string(),
                num(b.lower),
                num(b.upper),
                b.n.to_string(),
                num(b.mean_predicted),
                num(b.observed_fraction),
            ]
        })
        .collect();
    staging.write_csv(
        "calibration.csv",
        &["bin", "lower", "upper", "n", "mean_predicted", "observed_fraction"],
        &rows,
    )
}

fn write_balance(staging: &mut Staging, label: &str, b: &BalanceReport) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = b
        .covariates
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                c.in_model.to_string(),
                num(c.mean_treated),
                num(c.mean_control),
                num(c.weighted_mean_treated),
                num(c.weighted_mean_control),
                num(c.asb),
            ]
        })
        .collect();
    staging.write_csv(
        &format!("balance_{label}.csv"),
        &[
            "covariate",
            "in_model",
            "mean_treated",
            "mean_control",
            "weighted_mean_treated",
            "weighted_mean_control",
            "asb",
        ],
        &rows,
    )
}

fn write_distributions(staging: &mut Staging, label: &str, d: &DistributionSummary) -> Result<(), CliError> {
    let mut hist = Vec::new();
    let mut quant = Vec::new();
    for c in &d.covariates {
        for (group, g) in [("treated", &c.treated), ("control", &c.control)] {
            for (j, m) in g.mass.iter().enumerate() {
                hist.push(vec![
                    c.name.clone(),
                    group.to_string(),
                    (j + 1).to_string(),
                    num(c.edges[j]),
                    num(c.edges[j + 1]),
                    num(*m),
                ]);
            }
            for (p, q) in QUANTILE_LEVELS.iter().zip(&g.quantiles) {
                quant.push(vec![c.name.clone(), group.to_string(), num(*p), num(*q)]);
            }
        }
    }
    staging.write_csv(
        &format!("histogram_{label}.csv"),
        &["covariate", "group", "bin", "lower", "upper", "mass"],
        &hist,
    )?;
    staging.write_csv(
        &format!("quantiles_{label}.csv"),
        &["covariate", "group", "level", "value"],
        &quant,
    )
}

fn write_weights(
    staging: &mut Staging,
    data: &Dataset,
    model: &PropensityModel,
    exported: &[(String, Option<WeightedSample>)],
) -> Result<(), CliError> {
    let mut header = vec!["unit".to_string(), "treatment".to_string(), "score".to_string()];
    for (label, _) in exported {
        header.push(format!("{label}_raw"));
        header.push(format!("{label}_normalized"));
    }
    let rows: Vec<Vec<String>> = (0..data.n_units())
        .map(|i| {
            let mut r = vec![
                (i + 1).to_string(),
                (data.treatment()[i] as u8).to_string(),
                num(model.scores()[i]),
            ];
            for (_, w) in exported {
                match w {
                    Some(w) => {
                        r.push(num(w.raw()[i]));
                        r.push(num(w.normalized()[i]));
                    }
                    None => r.extend([String::new(), String::new()]),
                }
            }
            r
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    staging.write_csv("weights.csv", &header, &rows)
}

pub fn load_scenarios(args: &SimulateArgs) -> Result<ScenarioFile, CliError> {
    let mut file = ScenarioFile::from_file(&args.config)?;
    if !args.schemes.is_empty() {
        let alpha = args.alpha.unwrap_or(DEFAULT_ALPHA);
        let schemes = args
            .schemes
            .iter()
            .map(|s| parse_scheme(s, alpha))
            .collect::<Result<Vec<_>, _>>()?;
        for s in &mut file.scenarios {
            s.schemes = schemes.clone();
        }
    }
    if args.seed.is_some() || args.replicates.is_some() {
        let mc = file.monte_carlo.get_or_insert(MonteCarloSettings {
            n_total: MC_DEFAULT_TOTAL,
            n_sims: 0,
            seed: 0,
            score: Default::default(),
        });
        if let Some(seed) = args.seed {
            mc.seed = seed;
        }
        if let Some(r) = args.replicates {
            mc.n_sims = r;
        }
        if mc.n_sims < 2 {
            return Err(CliError::Config("Monte Carlo needs at least 2 simulations".into()));
        }
    }
    if file.scenarios.iter().any(|s| s.schemes.is_empty()) {
        return Err(CliError::Config("scenario without schemes".into()));
    }
    Ok(file)
}

#[derive(Serialize)]
struct SimulateFile<'a> {
    config: &'a ScenarioFile,
    optimality: Vec<(String, OptimalityReport)>,
    monte_carlo: Vec<(String, MonteCarloReport)>,
}

pub fn simulate(file: &ScenarioFile, staging: &mut Staging) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let mut optimality = Vec::new();
    let mut mc_reports = Vec::new();
    for spec in &file.scenarios {
        for scheme in &spec.schemes {
            let r = relative_variance(spec, scheme)?;
            let mut row = vec![
                spec.name.clone(),
                scheme.to_string(),
                num(r.relative_variance),
                num(r.quadrature_error),
                r.divergence.clone().unwrap_or_default(),
            ];
            if let Some(mc) = &file.monte_carlo {
                if r.is_divergent() {
                    row.extend([String::new(), String::new(), String::new()]);
                } else {
                    let mut cfg = MonteCarloConfig::for_total(spec, mc.n_total, mc.n_sims, mc.seed);
                    cfg.score = mc.score;
                    let m = monte_carlo_check(spec, scheme, &cfg)?;
                    row.extend([num(m.empirical_relative_variance), num(m.ratio), m.n_failed.to_string()]);
                    mc_reports.push((spec.name.clone(), m));
                }
            }
            rows.push(row);
        }
        optimality.push((spec.name.clone(), optimality_scan(spec, &spec.schemes)?));
    }
    let mut header = vec!["scenario", "scheme", "relative_variance", "quadrature_error", "note"];
    if file.monte_carlo.is_some() {
        header.extend(["mc_relative_variance", "mc_ratio", "mc_failed"]);
    }
    staging.write_csv("relative_variance.csv", &header, &rows)?;
    staging.write_json(
        "simulate.json",
        &SimulateFile {
            config: file,
            optimality,
            monte_carlo: mc_reports,
        },
    )
}
