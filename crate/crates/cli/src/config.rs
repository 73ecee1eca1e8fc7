use std::path::Path;

use fqb_core::bestrowden::GenuineAggregate;
use fqb_core::{ErcThreshold, ThresholdScope};
use serde::Deserialize;

use crate::CliError;

/// Defaults loaded from `--run-config`. Every field is optional; a flag given
/// on the command line always takes precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub impostor_cap: Option<usize>,
    pub fmr_targets: Option<Vec<f64>>,
    pub attribute: Option<String>,
    pub attributes: Option<Vec<String>>,
    pub estimators: Option<Vec<String>>,
    pub m: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub normalize: Option<bool>,
    pub lambda_grid: Option<Vec<f64>>,
    pub folds: Option<usize>,
    pub aggregate: Option<GenuineAggregate>,
    pub reject_grid: Option<Vec<f64>>,
    pub proportion_points: Option<usize>,
    pub bins: Option<usize>,
    pub threshold_scope: Option<ThresholdScope>,
    pub erc_threshold: Option<ErcThreshold>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(1)
    }
}

/// Flag, then config value, then default.
pub fn pick<T>(flag: Option<T>, config: Option<T>, default: impl FnOnce() -> T) -> T {
    flag.or(config).unwrap_or_else(default)
}
