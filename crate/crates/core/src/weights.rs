//! Balancing weights `(h/e, h/(1-e))` for a choice of tilting function `h`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::dataset::{Dataset, Group, PerGroup};
use crate::propensity::PropensityModel;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("empty target population: {0} group has zero total weight")]
    EmptyTargetPopulation(Group),
    #[error("score {score} at unit {unit} is 0 or 1; inverse-probability weight is infinite")]
    DegenerateScore { unit: usize, score: f64 },
    #[error("tilting function returned {value} at unit {unit}")]
    InvalidTilt { unit: usize, value: f64 },
    #[error("invalid weight {value} at unit {unit}")]
    InvalidWeight { unit: usize, value: f64 },
    #[error("truncation alpha {0} outside [0, 0.5)")]
    InvalidAlpha(f64),
    #[error("unknown covariate '{0}'")]
    UnknownCovariate(String),
    #[error("dataset has no sampling weights")]
    NoSamplingWeights,
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error("row {row} is not a probability vector: {reason}")]
    NotAProbabilityVector { row: usize, reason: String },
    #[error("cannot parse weight scheme '{0}'")]
    Parse(String),
}

type TiltFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// User-supplied tilting function `h(score, covariate row)`.
#[derive(Clone)]
pub struct CustomTilt {
    label: String,
    score_only: bool,
    h: Arc<TiltFn>,
}

impl CustomTilt {
    pub fn new(label: impl Into<String>, h: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        CustomTilt {
            label: label.into(),
            score_only: false,
            h: Arc::new(h),
        }
    }

    /// A tilt that depends on the propensity score only, usable in the
    /// asymptotic variance calculations.
    pub fn of_score(label: impl Into<String>, h: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        CustomTilt {
            label: label.into(),
            score_only: true,
            h: Arc::new(move |e, _| h(e)),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl fmt::Debug for CustomTilt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomTilt").field("label", &self.label).finish()
    }
}

/// Target population / estimand selector.
#[derive(Debug, Clone)]
pub enum WeightScheme {
    /// All weights 1: the plain difference of group means (not a balancing weight).
    Unweighted,
    /// h = 1, Horvitz-Thompson weights, ATE.
    Combined,
    /// h = e, ATT.
    Treated,
    /// h = 1 - e, ATC.
    Control,
    /// h = 1(alpha < e < 1 - alpha).
    Truncated { alpha: f64 },
    /// h = e(1 - e), ATO.
    Overlap,
    /// HT weights times 1(lower < x_column < upper).
    CovariateIndicator { column: String, lower: f64, upper: f64 },
    Custom(CustomTilt),
}

impl WeightScheme {
    pub fn truncated(alpha: f64) -> Result<Self, WeightError> {
        if !(0.0..0.5).contains(&alpha) {
            return Err(WeightError::InvalidAlpha(alpha));
        }
        Ok(WeightScheme::Truncated { alpha })
    }

    /// The five schemes compared in the optimality checks.
    pub fn standard_candidates(alpha: f64) -> Vec<WeightScheme> {
        vec![
            WeightScheme::Combined,
            WeightScheme::Treated,
            WeightScheme::Control,
            WeightScheme::Truncated { alpha },
            WeightScheme::Overlap,
        ]
    }

    pub fn is_overlap(&self) -> bool {
        matches!(self, WeightScheme::Overlap)
    }

    /// `h` as a function of the score and its complement, when the scheme
    /// depends on the score alone. `None` for covariate-based and
    /// unweighted schemes.
    pub fn tilt_of_score(&self, e: f64, e_complement: f64) -> Option<f64> {
        Some(match self {
            WeightScheme::Combined => 1.0,
            WeightScheme::Treated => e,
            WeightScheme::Control => e_complement,
            WeightScheme::Truncated { alpha } => {
                if *alpha < e && *alpha < e_complement {
                    1.0
                } else {
                    0.0
                }
            }
            WeightScheme::Overlap => e * e_complement,
            WeightScheme::Custom(c) if c.score_only => (c.h)(e, &[]),
            _ => return None,
        })
    }

    /// Raw weight for one unit.
    fn unit_weight(&self, treated: bool, e: f64, row: &dyn Fn() -> Vec<f64>, x: Option<f64>) -> Result<f64, f64> {
        let ht = |e: f64| if treated { 1.0 / e } else { 1.0 / (1.0 - e) };
        Ok(match self {
            WeightScheme::Unweighted => 1.0,
            WeightScheme::Combined => ht(e),
            WeightScheme::Treated => {
                if treated {
                    1.0
                } else {
                    e / (1.0 - e)
                }
            }
            WeightScheme::Control => {
                if treated {
                    (1.0 - e) / e
                } else {
                    1.0
                }
            }
            WeightScheme::Truncated { alpha } => {
                if *alpha < e && e < 1.0 - *alpha {
                    ht(e)
                } else {
                    0.0
                }
            }
            WeightScheme::Overlap => {
                if treated {
                    1.0 - e
                } else {
                    e
                }
            }
            WeightScheme::CovariateIndicator { lower, upper, .. } => {
                let v = x.unwrap_or(f64::NAN);
                if *lower < v && v < *upper {
                    ht(e)
                } else {
                    0.0
                }
            }
            WeightScheme::Custom(c) => {
                let h = (c.h)(e, &row());
                if !(h >= 0.0 && h.is_finite()) {
                    return Err(h);
                }
                h / if treated { e } else { 1.0 - e }
            }
        })
    }

    fn needs_interior_scores(&self) -> bool {
        !matches!(self, WeightScheme::Unweighted | WeightScheme::Overlap)
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightScheme::Unweighted => f.write_str("unweighted"),
            WeightScheme::Combined => f.write_str("ht"),
            WeightScheme::Treated => f.write_str("att"),
            WeightScheme::Control => f.write_str("atc"),
            WeightScheme::Truncated { alpha } => write!(f, "truncated({alpha})"),
            WeightScheme::Overlap => f.write_str("overlap"),
            WeightScheme::CovariateIndicator { column, lower, upper } => {
                write!(f, "indicator({column},{lower},{upper})")
            }
            WeightScheme::Custom(c) => write!(f, "custom:{}", c.label),
        }
    }
}

impl FromStr for WeightScheme {
    type Err = WeightError;

    /// Accepts `unweighted`, `ht`/`ate`/`combined`, `att`/`treated`,
    /// `atc`/`control`, `overlap`/`ato`, `truncated(alpha)` and
    /// `indicator(column,lower,upper)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let lower = s.to_ascii_lowercase();
        let num = |v: &str| v.parse::<f64>().map_err(|_| WeightError::Parse(s.to_string()));
        match lower.as_str() {
            "unweighted" | "none" => return Ok(WeightScheme::Unweighted),
            "ht" | "ate" | "combined" | "iptw" => return Ok(WeightScheme::Combined),
            "att" | "treated" => return Ok(WeightScheme::Treated),
            "atc" | "control" => return Ok(WeightScheme::Control),
            "overlap" | "ato" => return Ok(WeightScheme::Overlap),
            _ => {}
        }
        if let Some(a) = call_args(s, "truncated") {
            if a.len() == 1 {
                return WeightScheme::truncated(num(&a[0])?);
            }
        }
        if let Some(a) = call_args(s, "indicator") {
            if a.len() == 3 {
                return Ok(WeightScheme::CovariateIndicator {
                    column: a[0].to_string(),
                    lower: num(&a[1])?,
                    upper: num(&a[2])?,
                });
            }
        }
        Err(WeightError::Parse(s.to_string()))
    }
}

fn call_args<'a>(s: &'a str, name: &str) -> Option<Vec<&'a str>> {
    let open = s.find('(')?;
    if !s[..open].trim().eq_ignore_ascii_case(name) {
        return None;
    }
    let inner = s[open + 1..].strip_suffix(')')?;
    Some(inner.split(',').map(str::trim).collect())
}

impl Serialize for WeightScheme {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WeightScheme {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-unit balancing weights with their provenance.
#[derive(Debug, Clone, Serialize)]
pub struct WeightedSample {
    scheme: WeightScheme,
    #[serde(skip)]
    treated: Vec<bool>,
    raw: Vec<f64>,
    normalized: Vec<f64>,
    effective_sample_size: PerGroup<f64>,
    provenance: Vec<String>,
    model_covariates: Vec<String>,
}

impl WeightedSample {
    /// Validates raw weights and normalizes them to sum to one in each group.
    pub fn from_raw(
        scheme: WeightScheme,
        treated: Vec<bool>,
        raw: Vec<f64>,
        model_covariates: Vec<String>,
    ) -> Result<Self, WeightError> {
        if treated.len() != raw.len() {
            return Err(WeightError::Shape(format!(
                "{} treatment flags for {} weights",
                treated.len(),
                raw.len()
            )));
        }
        if let Some((unit, value)) = raw.iter().enumerate().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
            return Err(WeightError::InvalidWeight { unit, value: *value });
        }
        let mut total = [0.0f64; 2];
        let mut total_sq = [0.0f64; 2];
        for (t, w) in treated.iter().zip(&raw) {
            total[*t as usize] += w;
            total_sq[*t as usize] += w * w;
        }
        for (g, group) in [(1, Group::Treated), (0, Group::Control)] {
            if !(total[g] > 0.0) {
                return Err(WeightError::EmptyTargetPopulation(group));
            }
        }
        let normalized = treated
            .iter()
            .zip(&raw)
            .map(|(t, w)| w / total[*t as usize])
            .collect();
        let provenance = vec![format!("scheme={scheme}")];
        Ok(WeightedSample {
            scheme,
            treated,
            raw,
            normalized,
            effective_sample_size: PerGroup {
                treated: total[1] * total[1] / total_sq[1],
                control: total[0] * total[0] / total_sq[0],
            },
            provenance,
            model_covariates,
        })
    }

    pub fn scheme(&self) -> &WeightScheme {
        &self.scheme
    }
    pub fn treated(&self) -> &[bool] {
        &self.treated
    }
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }
    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }
    pub fn effective_sample_size(&self) -> PerGroup<f64> {
        self.effective_sample_size
    }
    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }
    pub fn model_covariates(&self) -> &[String] {
        &self.model_covariates
    }
    pub fn len(&self) -> usize {
        self.raw.len()
    }
    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Sum of normalized weights in a group (1 by construction).
    pub fn group_total(&self, group: Group) -> f64 {
        let want = group == Group::Treated;
        self.treated
            .iter()
            .zip(&self.normalized)
            .filter(|(t, _)| **t == want)
            .map(|(_, w)| w)
            .sum()
    }
}

/// Raw weights per unit without the non-empty-group check; zero weights are
/// allowed everywhere.
pub fn raw_weights(model: &PropensityModel, data: &Dataset, scheme: &WeightScheme) -> Result<Vec<f64>, WeightError> {
    let scores = model.scores();
    if scores.len() != data.n_units() {
        return Err(WeightError::Shape(format!(
            "model has {} scores, data has {} units",
            scores.len(),
            data.n_units()
        )));
    }
    let indicator_col = match scheme {
        WeightScheme::CovariateIndicator { column, .. } => Some(
            data.covariate(column)
                .ok_or_else(|| WeightError::UnknownCovariate(column.clone()))?,
        ),
        _ => None,
    };
    let needs_interior = scheme.needs_interior_scores();
    scores
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            if needs_interior && !(e > 0.0 && e < 1.0) {
                // truncation discards such units before any division
                let outside_truncation = matches!(scheme, WeightScheme::Truncated { alpha } if !(*alpha < e && e < 1.0 - *alpha));
                if !outside_truncation {
                    return Err(WeightError::DegenerateScore { unit: i, score: e });
                }
            }
            let treated = data.treatment()[i];
            scheme
                .unit_weight(treated, e, &|| data.row(i), indicator_col.map(|c| c[i]))
                .map_err(|value| WeightError::InvalidTilt { unit: i, value })
        })
        .collect()
}

/// Balancing weights for `scheme` from the model's scores.
pub fn compute(model: &PropensityModel, data: &Dataset, scheme: &WeightScheme) -> Result<WeightedSample, WeightError> {
    let raw = raw_weights(model, data, scheme)?;
    let mut out = WeightedSample::from_raw(
        scheme.clone(),
        data.treatment().to_vec(),
        raw,
        model.covariate_names().to_vec(),
    )?;
    out.provenance.push(format!("model={:?}", model.kind()).to_lowercase());
    Ok(out)
}

/// Multiplies each unit's weight by its sampling weight and renormalizes.
pub fn combine_sampling_weights(weights: &WeightedSample, data: &Dataset) -> Result<WeightedSample, WeightError> {
    let sw = data.sampling_weights().ok_or(WeightError::NoSamplingWeights)?;
    if sw.len() != weights.len() {
        return Err(WeightError::Shape(format!(
            "{} sampling weights for {} units",
            sw.len(),
            weights.len()
        )));
    }
    let raw = weights.raw.iter().zip(sw).map(|(w, s)| w * s).collect();
    let mut out = WeightedSample::from_raw(
        weights.scheme.clone(),
        weights.treated.clone(),
        raw,
        weights.model_covariates.clone(),
    )?;
    out.provenance = weights.provenance.clone();
    out.provenance.push("sampling-weights".to_string());
    Ok(out)
}

/// Generalized overlap weights for J >= 2 groups:
/// `w_j = (sum_k 1/e_k)^-1 / e_j` for each unit.
pub fn multigroup_overlap(probabilities: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, WeightError> {
    probabilities
        .iter()
        .enumerate()
        .map(|(row, e)| {
            if e.len() < 2 {
                return Err(WeightError::NotAProbabilityVector {
                    row,
                    reason: format!("{} groups, need at least 2", e.len()),
                });
            }
            if let Some(v) = e.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
                return Err(WeightError::NotAProbabilityVector {
                    row,
                    reason: format!("entry {v} outside (0, 1)"),
                });
            }
            let sum: f64 = e.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(WeightError::NotAProbabilityVector {
                    row,
                    reason: format!("entries sum to {sum}"),
                });
            }
            let h = 1.0 / e.iter().map(|v| 1.0 / v).sum::<f64>();
            Ok(e.iter().map(|v| h / v).collect())
        })
        .collect()
}
