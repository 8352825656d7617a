//! Tabular ingestion, validation and covariate expansion.
//!
//! A [`Dataset`] holds one treatment indicator, an optional outcome, an
//! encoded covariate matrix (stored by column) and optional sampling weights.
//! Categorical sources are dummy coded against a reference level when the
//! file is loaded; powers, interactions and range indicators are appended by
//! [`expand`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("row {row}: treatment value '{value}' is not 0 or 1")]
    NonBinaryTreatment { row: usize, value: String },
    #[error("row {row}: missing value in column '{column}'")]
    MissingValue { row: usize, column: String },
    #[error("row {row}: cannot parse '{value}' in column '{column}' as a number")]
    NotNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: value {value} in binary column '{column}' is not 0 or 1")]
    NonBinaryCovariate {
        row: usize,
        column: String,
        value: f64,
    },
    #[error("row {row}: non-finite value in column '{column}'")]
    NonFinite { row: usize, column: String },
    #[error("row {row}: sampling weight {value} is not positive")]
    NonPositiveWeight { row: usize, value: f64 },
    #[error("empty {0} group")]
    EmptyGroup(Group),
    #[error("categorical column '{column}' has no level '{level}'")]
    UnknownLevel { column: String, level: String },
    #[error("transform on '{column}': {reason}")]
    InvalidTransform { column: String, reason: String },
    #[error("duplicate column name '{0}'")]
    DuplicateColumn(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid ingestion config: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Treated,
    Control,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Treated => f.write_str("treated"),
            Group::Control => f.write_str("control"),
        }
    }
}

/// A value per treatment group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerGroup<T> {
    pub treated: T,
    pub control: T,
}

impl<T> PerGroup<T> {
    pub fn get(&self, group: Group) -> &T {
        match group {
            Group::Treated => &self.treated,
            Group::Control => &self.control,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    #[default]
    Continuous,
    Binary,
    Categorical,
}

/// A derived term appended to the design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Transform {
    /// Powers 2..=degree of the source column.
    Power { degree: u32 },
    /// Product with another encoded column.
    Interaction { with: String },
    /// 1(lower < x < upper)
    Indicator { lower: f64, upper: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub column: String,
    #[serde(default)]
    pub kind: CovariateKind,
    /// Reference level for categorical sources; defaults to the first level
    /// in sorted order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transforms: Vec<Transform>,
}

impl CovariateSpec {
    pub fn continuous(column: impl Into<String>) -> Self {
        CovariateSpec {
            column: column.into(),
            kind: CovariateKind::Continuous,
            reference: None,
            transforms: Vec::new(),
        }
    }

    pub fn with_transform(mut self, transform: Transform) -> Self {
        self.transforms.push(transform);
        self
    }
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSchema {
    pub treatment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_weight: Option<String>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
}

impl IngestSchema {
    pub fn from_toml_str(text: &str) -> Result<Self, DataError> {
        toml::from_str(text).map_err(|e| DataError::Config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Schema matching the layout written by [`Dataset::write_csv`].
    pub fn canonical(data: &Dataset) -> Self {
        IngestSchema {
            treatment: TREATMENT_HEADER.to_string(),
            outcome: data.outcome.as_ref().map(|_| OUTCOME_HEADER.to_string()),
            sampling_weight: data
                .sampling_weight
                .as_ref()
                .map(|_| WEIGHT_HEADER.to_string()),
            covariates: data
                .names
                .iter()
                .map(|n| CovariateSpec::continuous(n.clone()))
                .collect(),
        }
    }
}

const TREATMENT_HEADER: &str = "treatment";
const OUTCOME_HEADER: &str = "outcome";
const WEIGHT_HEADER: &str = "sampling_weight";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    treatment: Vec<bool>,
    outcome: Option<Vec<f64>>,
    columns: Vec<Vec<f64>>,
    names: Vec<String>,
    sampling_weight: Option<Vec<f64>>,
}

impl Dataset {
    /// Builds a validated dataset from in-memory columns.
    pub fn new(
        treatment: Vec<bool>,
        outcome: Option<Vec<f64>>,
        covariates: Vec<(String, Vec<f64>)>,
        sampling_weight: Option<Vec<f64>>,
    ) -> Result<Self, DataError> {
        let n = treatment.len();
        if n == 0 {
            return Err(DataError::Shape("dataset has no rows".into()));
        }
        if let Some(y) = &outcome {
            if y.len() != n {
                return Err(DataError::Shape(format!("outcome has {} rows, expected {n}", y.len())));
            }
            check_finite(y, OUTCOME_HEADER)?;
        }
        if let Some(w) = &sampling_weight {
            if w.len() != n {
                return Err(DataError::Shape(format!(
                    "sampling weight has {} rows, expected {n}",
                    w.len()
                )));
            }
            if let Some((row, value)) = w.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
                return Err(DataError::NonPositiveWeight { row, value: *value });
            }
        }
        let mut names = Vec::with_capacity(covariates.len());
        let mut columns = Vec::with_capacity(covariates.len());
        let mut seen = HashSet::new();
        for (name, values) in covariates {
            if values.len() != n {
                return Err(DataError::Shape(format!(
                    "covariate '{name}' has {} rows, expected {n}",
                    values.len()
                )));
            }
            if !seen.insert(name.clone()) {
                return Err(DataError::DuplicateColumn(name));
            }
            check_finite(&values, &name)?;
            names.push(name);
            columns.push(values);
        }
        let n1 = treatment.iter().filter(|z| **z).count();
        if n1 == 0 {
            return Err(DataError::EmptyGroup(Group::Treated));
        }
        if n1 == n {
            return Err(DataError::EmptyGroup(Group::Control));
        }
        Ok(Dataset {
            treatment,
            outcome,
            columns,
            names,
            sampling_weight,
        })
    }

    pub fn n_units(&self) -> usize {
        self.treatment.len()
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|z| **z).count()
    }

    pub fn n_control(&self) -> usize {
        self.n_units() - self.n_treated()
    }

    pub fn n_covariates(&self) -> usize {
        self.columns.len()
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn outcome(&self) -> Option<&[f64]> {
        self.outcome.as_deref()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.columns[k]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn covariate(&self, name: &str) -> Option<&[f64]> {
        self.column_index(name).map(|k| self.columns[k].as_slice())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn sampling_weights(&self) -> Option<&[f64]> {
        self.sampling_weight.as_deref()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    /// Indices of covariate columns that take a single value.
    pub fn constant_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.iter().all(|v| *v == c[0]))
            .map(|(k, _)| k)
            .collect()
    }

    /// Copy of the dataset without the given covariate columns.
    pub fn without_columns(&self, drop: &[usize]) -> Dataset {
        let mut out = self.clone();
        let keep: Vec<usize> = (0..self.n_covariates()).filter(|k| !drop.contains(k)).collect();
        out.columns = keep.iter().map(|k| self.columns[*k].clone()).collect();
        out.names = keep.iter().map(|k| self.names[*k].clone()).collect();
        out
    }

    pub fn without_constant_columns(&self) -> Dataset {
        let constant = self.constant_columns();
        for k in &constant {
            log::warn!("dropping constant covariate '{}'", self.names[*k]);
        }
        self.without_columns(&constant)
    }

    /// Keeps only the named covariates, in the given order.
    pub fn select_columns(&self, names: &[String]) -> Result<Dataset, DataError> {
        let idx = names
            .iter()
            .map(|n| self.column_index(n).ok_or_else(|| DataError::MissingColumn(n.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = self.clone();
        out.columns = idx.iter().map(|k| self.columns[*k].clone()).collect();
        out.names = names.to_vec();
        Ok(out)
    }

    pub fn with_column(&self, name: impl Into<String>, values: Vec<f64>) -> Result<Dataset, DataError> {
        let mut cols: Vec<(String, Vec<f64>)> =
            self.names.iter().cloned().zip(self.columns.iter().cloned()).collect();
        cols.push((name.into(), values));
        Dataset::new(self.treatment.clone(), self.outcome.clone(), cols, self.sampling_weight.clone())
    }

    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Dataset, DataError> {
        let cols = self.names.iter().cloned().zip(self.columns.iter().cloned()).collect();
        Dataset::new(self.treatment.clone(), Some(outcome), cols, self.sampling_weight.clone())
    }

    /// Rows at the given indices (repeats allowed), as used by the bootstrap.
    pub fn resample(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let pick = |v: &[f64]| indices.iter().map(|i| v[*i]).collect::<Vec<_>>();
        Dataset::new(
            indices.iter().map(|i| self.treatment[*i]).collect(),
            self.outcome.as_deref().map(pick),
            self.names
                .iter()
                .cloned()
                .zip(self.columns.iter().map(|c| pick(c)))
                .collect(),
            self.sampling_weight.as_deref().map(pick),
        )
    }

    /// Writes the canonical CSV layout: treatment, outcome, covariates,
    /// sampling weight, with shortest round-trip float formatting.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![TREATMENT_HEADER.to_string()];
        if self.outcome.is_some() {
            header.push(OUTCOME_HEADER.to_string());
        }
        header.extend(self.names.iter().cloned());
        if self.sampling_weight.is_some() {
            header.push(WEIGHT_HEADER.to_string());
        }
        w.write_record(&header)?;
        for i in 0..self.n_units() {
            let mut rec = vec![if self.treatment[i] { "1".to_string() } else { "0".to_string() }];
            if let Some(y) = &self.outcome {
                rec.push(y[i].to_string());
            }
            rec.extend(self.columns.iter().map(|c| c[i].to_string()));
            if let Some(sw) = &self.sampling_weight {
                rec.push(sw[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_finite(values: &[f64], column: &str) -> Result<(), DataError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(row) => Err(DataError::NonFinite {
            row,
            column: column.to_string(),
        }),
        None => Ok(()),
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan")
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl RawTable {
    fn read(path: &Path) -> Result<Self, DataError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let header = reader.headers()?.iter().map(str::to_string).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()?;
        Ok(RawTable { header, rows })
    }

    fn index(&self, column: &str) -> Result<usize, DataError> {
        self.header
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| DataError::MissingColumn(column.to_string()))
    }

    fn cells(&self, column: &str) -> Result<Vec<&str>, DataError> {
        let k = self.index(column)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(row, r)| match r.get(k).map(String::as_str) {
                Some(c) if !is_missing(c) => Ok(c),
                _ => Err(DataError::MissingValue {
                    row,
                    column: column.to_string(),
                }),
            })
            .collect()
    }

    fn numeric(&self, column: &str) -> Result<Vec<f64>, DataError> {
        self.cells(column)?
            .into_iter()
            .enumerate()
            .map(|(row, c)| {
                c.parse::<f64>().map_err(|_| DataError::NotNumeric {
                    row,
                    column: column.to_string(),
                    value: c.to_string(),
                })
            })
            .collect()
    }
}

/// Reads a CSV file and encodes it according to `schema`.
pub fn load(path: impl AsRef<Path>, schema: &IngestSchema) -> Result<Dataset, DataError> {
    let table = RawTable::read(path.as_ref())?;
    let treatment = table
        .cells(&schema.treatment)?
        .into_iter()
        .enumerate()
        .map(|(row, c)| match c.parse::<f64>() {
            Ok(v) if v == 1.0 => Ok(true),
            Ok(v) if v == 0.0 => Ok(false),
            _ => Err(DataError::NonBinaryTreatment {
                row,
                value: c.to_string(),
            }),
        })
        .collect::<Result<Vec<bool>, _>>()?;
    let outcome = schema.outcome.as_deref().map(|c| table.numeric(c)).transpose()?;
    let sampling_weight = match schema.sampling_weight.as_deref() {
        Some(c) => {
            let w = table.numeric(c)?;
            if let Some((row, value)) = w.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(DataError::NonPositiveWeight { row, value: *value });
            }
            Some(w)
        }
        None => None,
    };

    let mut encoded = Vec::new();
    for spec in &schema.covariates {
        encoded.extend(encode_source(&table, spec)?);
    }
    let data = Dataset::new(treatment, outcome, encoded, sampling_weight)?;
    let data = expand(&data, &schema.covariates)?;
    log::info!(
        "loaded {} units (treated {}, control {}), {} covariate columns",
        data.n_units(),
        data.n_treated(),
        data.n_control(),
        data.n_covariates()
    );
    for k in data.constant_columns() {
        log::warn!("covariate '{}' is constant", data.names[k]);
    }
    Ok(data)
}

fn encode_source(table: &RawTable, spec: &CovariateSpec) -> Result<Vec<(String, Vec<f64>)>, DataError> {
    match spec.kind {
        CovariateKind::Continuous => Ok(vec![(spec.column.clone(), table.numeric(&spec.column)?)]),
        CovariateKind::Binary => {
            let values = table.numeric(&spec.column)?;
            if let Some((row, v)) = values.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
                return Err(DataError::NonBinaryCovariate {
                    row,
                    column: spec.column.clone(),
                    value: *v,
                });
            }
            Ok(vec![(spec.column.clone(), values)])
        }
        CovariateKind::Categorical => {
            let cells = table.cells(&spec.column)?;
            let levels: BTreeSet<&str> = cells.iter().copied().collect();
            let reference = match &spec.reference {
                Some(r) if levels.contains(r.as_str()) => r.as_str(),
                Some(r) => {
                    return Err(DataError::UnknownLevel {
                        column: spec.column.clone(),
                        level: r.clone(),
                    })
                }
                None => levels.iter().next().copied().unwrap_or_default(),
            };
            Ok(levels
                .iter()
                .filter(|l| **l != reference)
                .map(|level| {
                    let dummy = cells.iter().map(|c| if c == level { 1.0 } else { 0.0 }).collect();
                    (format!("{}={}", spec.column, level), dummy)
                })
                .collect())
        }
    }
}

fn term_names(spec: &CovariateSpec, transform: &Transform) -> Result<Vec<String>, DataError> {
    let col = &spec.column;
    match transform {
        Transform::Power { degree } => {
            if *degree < 1 {
                return Err(DataError::InvalidTransform {
                    column: col.clone(),
                    reason: format!("power degree {degree} is below 1"),
                });
            }
            Ok((2..=*degree).map(|d| format!("{col}^{d}")).collect())
        }
        Transform::Interaction { with } => Ok(vec![format!("{col}:{with}")]),
        Transform::Indicator { lower, upper } => Ok(vec![format!("1({lower}<{col}<{upper})")]),
    }
}

/// Appends derived columns for every transform in `specs`. Original columns
/// are kept; derived columns follow in spec order.
pub fn expand(data: &Dataset, specs: &[CovariateSpec]) -> Result<Dataset, DataError> {
    let lookup: HashMap<&str, usize> = data
        .names
        .iter()
        .enumerate()
        .map(|(k, n)| (n.as_str(), k))
        .collect();
    let mut out = data.clone();
    for spec in specs.iter().filter(|s| !s.transforms.is_empty()) {
        let source = *lookup
            .get(spec.column.as_str())
            .ok_or_else(|| DataError::MissingColumn(spec.column.clone()))?;
        let x = &data.columns[source];
        for transform in &spec.transforms {
            let names = term_names(spec, transform)?;
            let values: Vec<Vec<f64>> = match transform {
                Transform::Power { degree } => (2..=*degree as i32)
                    .map(|d| x.iter().map(|v| v.powi(d)).collect())
                    .collect(),
                Transform::Interaction { with } => {
                    let other = lookup.get(with.as_str()).ok_or_else(|| DataError::InvalidTransform {
                        column: spec.column.clone(),
                        reason: format!("interaction references unknown column '{with}'"),
                    })?;
                    let y = &data.columns[*other];
                    vec![x.iter().zip(y).map(|(a, b)| a * b).collect()]
                }
                Transform::Indicator { lower, upper } => vec![x
                    .iter()
                    .map(|v| if *lower < *v && *v < *upper { 1.0 } else { 0.0 })
                    .collect()],
            };
            for (name, col) in names.into_iter().zip(values) {
                if out.names.contains(&name) {
                    return Err(DataError::DuplicateColumn(name));
                }
                check_finite(&col, &name)?;
                out.names.push(name);
                out.columns.push(col);
            }
        }
    }
    Ok(out)
}
