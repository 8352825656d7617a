use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::IngestSchema;
use crate::estimate::BootstrapMode;
use crate::weights::WeightScheme;

use super::CliError;

/// Truncation threshold used for a bare `truncated` scheme.
pub const DEFAULT_ALPHA: f64 = 0.1;

fn default_schemes() -> Vec<String> {
    ["unweighted", "ht", "att", "atc", "overlap"].map(String::from).to_vec()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSettings {
    pub replicates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub stratified: bool,
    #[serde(default)]
    pub mode: BootstrapMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSettings {
    #[serde(default = "ReportSettings::default_calibration_bins")]
    pub calibration_bins: usize,
    #[serde(default = "ReportSettings::default_histogram_bins")]
    pub histogram_bins: usize,
}

impl ReportSettings {
    fn default_calibration_bins() -> usize {
        10
    }
    fn default_histogram_bins() -> usize {
        20
    }
}

impl Default for ReportSettings {
    fn default() -> Self {
        ReportSettings {
            calibration_bins: Self::default_calibration_bins(),
            histogram_bins: Self::default_histogram_bins(),
        }
    }
}

/// One file drives a whole analysis; command-line flags override fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// CSV path, relative to the config file.
    pub data: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub ingest: IngestSchema,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapSettings>,
    #[serde(default)]
    pub report: ReportSettings,
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub schemes: Vec<String>,
    pub alpha: Option<f64>,
}

impl AnalysisConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: AnalysisConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if config.data.is_relative() {
            if let Some(dir) = path.parent() {
                config.data = dir.join(&config.data);
            }
        }
        if let (Some(out), Some(dir)) = (&config.out, path.parent()) {
            if out.is_relative() {
                config.out = Some(dir.join(out));
            }
        }
        Ok(config)
    }

    /// Applies flag overrides and checks invariants.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self, CliError> {
        if !o.schemes.is_empty() {
            self.schemes = o.schemes.clone();
        }
        if o.alpha.is_some() {
            self.alpha = o.alpha;
        }
        if let Some(r) = o.replicates {
            match &mut self.bootstrap {
                Some(b) => b.replicates = r,
                None => {
                    self.bootstrap = Some(BootstrapSettings {
                        replicates: r,
                        seed: None,
                        stratified: false,
                        mode: BootstrapMode::Refit,
                    })
                }
            }
        }
        if let (Some(seed), Some(b)) = (o.seed, &mut self.bootstrap) {
            b.seed = Some(seed);
        }
        if let Some(b) = &self.bootstrap {
            if b.replicates > 0 && b.seed.is_none() {
                return Err(CliError::Config("bootstrap requested but no seed given".into()));
            }
            if b.replicates == 1 {
                return Err(CliError::Config("bootstrap needs at least 2 replicates".into()));
            }
        }
        if self.schemes.is_empty() {
            return Err(CliError::Config("no weight schemes given".into()));
        }
        if !self.data.exists() {
            return Err(CliError::Config(format!("data file {} does not exist", self.data.display())));
        }
        // canonical spelling so reports are stable
        self.schemes = self.weight_schemes()?.iter().map(|s| s.to_string()).collect();
        Ok(self)
    }

    pub fn weight_schemes(&self) -> Result<Vec<WeightScheme>, CliError> {
        let alpha = self.alpha.unwrap_or(DEFAULT_ALPHA);
        self.schemes.iter().map(|s| parse_scheme(s, alpha)).collect()
    }

    pub fn bootstrap_seed(&self) -> Option<(usize, u64)> {
        self.bootstrap
            .as_ref()
            .filter(|b| b.replicates > 0)
            .and_then(|b| b.seed.map(|s| (b.replicates, s)))
    }
}

pub fn parse_scheme(s: &str, alpha: f64) -> Result<WeightScheme, CliError> {
    let scheme = if s.trim().eq_ignore_ascii_case("truncated") {
        WeightScheme::truncated(alpha)
    } else {
        s.parse()
    };
    scheme.map_err(|e| CliError::Config(e.to_string()))
}

/// File-name-safe label for a scheme.
pub fn file_label(scheme: &WeightScheme) -> String {
    let mut out = String::new();
    for c in scheme.to_string().chars() {
        if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
            out.push(c);
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_end_matches('_').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_file_safe() {
        assert_eq!(file_label(&WeightScheme::Truncated { alpha: 0.1 }), "truncated_0.1");
        let s = WeightScheme::CovariateIndicator {
            column: "age".into(),
            lower: 18.0,
            upper: 65.0,
        };
        assert_eq!(file_label(&s), "indicator_age_18_65");
        assert_eq!(file_label(&WeightScheme::Overlap), "overlap");
    }

    #[test]
    fn bare_truncated_uses_alpha() {
        let s = parse_scheme("truncated", 0.05).unwrap();
        assert_eq!(s.to_string(), "truncated(0.05)");
        assert!(parse_scheme("truncated", 0.6).is_err());
    }
}
