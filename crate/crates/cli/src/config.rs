//! Run configuration.
//!
//! One TOML document. Precedence, lowest first: built-in defaults, a bundled
//! preset (`--preset`), the config file (`--config`), command-line flags.
//! Preset and file are merged table by table, so a file only needs the keys
//! it changes.

use std::path::{Path, PathBuf};

use forestiv::baselines::{BlindspotDesign, SimexConfig};
use forestiv::data::{ColumnRole, Schema};
use forestiv::forest::ForestParams;
use forestiv::forestiv::ForestIvConfig;
use forestiv::simlab::{ExperimentConfig, SubsetConfig, SweepAxis};
use serde::{Deserialize, Serialize};

use crate::CliError;

const PRESETS: &[(&str, &str)] = &[
    ("bike", include_str!("../presets/bike.toml")),
    ("bank", include_str!("../presets/bank.toml")),
    ("boston", include_str!("../presets/boston.toml")),
    ("cancer", include_str!("../presets/cancer.toml")),
    ("blindspot", include_str!("../presets/blindspot.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every seed in a run is derived from this one.
    pub master_seed: u64,
    pub data: DataSection,
    /// Forest grown by `fit-forest`.
    pub forest: ForestParams,
    /// Settings for `estimate` and `diagnose`.
    pub forest_iv: ForestIvConfig,
    pub subset: SubsetConfig,
    pub simex: SimexConfig,
    /// Synthetic experiment run by `simulate` and `benchmark`.
    pub experiment: ExperimentConfig,
    /// When present, `simulate` runs a sensitivity sweep instead.
    pub sweep: Option<SweepSection>,
    /// When present, `benchmark` also runs the SIMEX blindspot check.
    pub blindspot: Option<BlindspotDesign>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 1,
            data: DataSection::default(),
            forest: ForestParams::regression(100),
            forest_iv: ForestIvConfig::default(),
            subset: SubsetConfig::default(),
            simex: SimexConfig::default(),
            experiment: ExperimentConfig::default(),
            sweep: None,
            blindspot: None,
        }
    }
}

/// Layout of a CSV for `fit-forest`, `estimate` and `diagnose`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Ground-truth column; empty cells mark unlabelled rows.
    pub truth: String,
    /// Outcome of the econometric model.
    pub outcome: Option<String>,
    /// Control covariates; an intercept is always added.
    pub controls: Vec<String>,
    pub categorical: Vec<String>,
    /// Columns that are neither features nor econ variables.
    pub ignore: Vec<String>,
    /// Random split used when the file carries no partition column.
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            truth: "truth".into(),
            outcome: None,
            controls: Vec::new(),
            categorical: Vec::new(),
            ignore: Vec::new(),
            n_train: None,
            n_test: None,
        }
    }
}

impl DataSection {
    /// Every column not named here is a numeric feature.
    pub fn schema(&self) -> Schema {
        let mut s = Schema::with_truth(&self.truth);
        for c in self.outcome.iter().chain(&self.controls).chain(&self.ignore) {
            s = s.set(c, ColumnRole::Ignore);
        }
        for c in &self.categorical {
            s = s.set(c, ColumnRole::Categorical);
        }
        s
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

fn parse(text: &str, origin: &str) -> Result<toml::Table, CliError> {
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Config(format!("{origin}: {e}")))
}

/// Recursively overlays `top` on `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn load(preset: Option<&str>, path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut table = toml::Table::new();
    if let Some(name) = preset {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                CliError::Config(format!(
                    "unknown preset '{name}' (available: {})",
                    preset_names().join(", ")
                ))
            })?;
        table = parse(text, &format!("preset {name}"))?;
    }
    if let Some(path) = path {
        if !path.exists() {
            return Err(CliError::Config(format!("file not found: {}", path.display())));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, parse(&text, &path.display().to_string())?);
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("invalid config: {e}")))?;
    Ok(cfg)
}

/// Output location helper: `dir/name`, creating `dir`.
pub fn out_path(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir.join(name))
}
