//! Run configuration file (TOML).
//!
//! ```toml
//! schema_version = 1
//!
//! [model]
//! M = 2
//! N = 2
//! coupling = "cartesian_full"
//! families = ["normal", "normal"]
//! covariates = [[], []]          # covariate column names per chain
//!
//! [fit]
//! restarts = 10
//! seed = 1
//! tolerance = 1e-6
//! max_iter = 1000
//!
//! [data]
//! input = "observations.csv"     # relative to this file
//! time_column = "time"
//! observation_columns = ["y1", "y2"]
//! missing_marker = "NA"
//!
//! [output]
//! directory = "chmm-out"
//! formats = ["csv", "json"]
//!
//! [simulation]                   # simstudy only
//! design = "coupled"
//! sd = 1.5
//! t_train = 1000
//! t_test = 100
//! replications = 100
//! restarts = 5
//! competing = ["cartesian_full", "single_chain", "independent_chains"]
//! ```

use std::path::{Path, PathBuf};

use chmm::{CouplingKind, EmissionFamily, ModelSpec, StateSpace};
use serde::{Deserialize, Serialize};

use crate::error::{io_error, CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub simulation: Option<SimulationSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(rename = "M")]
    pub num_chains: usize,
    #[serde(rename = "N")]
    pub states_per_chain: usize,
    pub coupling: String,
    pub families: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub restarts: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        Self { restarts: 10, seed: 1, tolerance: 1e-6, max_iter: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub input: PathBuf,
    #[serde(default)]
    pub time_column: Option<String>,
    pub observation_columns: Vec<String>,
    #[serde(default = "default_missing")]
    pub missing_marker: String,
}

fn default_missing() -> String {
    "NA".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: PathBuf::from("chmm-out"), formats: vec!["csv".into(), "json".into()] }
    }
}

impl OutputSection {
    pub fn wants(&self, format: &str) -> bool {
        self.formats.iter().any(|f| f == format)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// `coupled` or `independent`.
    pub design: String,
    pub sd: f64,
    pub t_train: usize,
    pub t_test: usize,
    pub replications: usize,
    pub restarts: usize,
    pub competing: Vec<String>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            design: "coupled".into(),
            sd: 1.5,
            t_train: 1000,
            t_test: 100,
            replications: 100,
            restarts: 5,
            competing: ["cartesian_full", "single_chain", "independent_chains"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(CliError::usage(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        for f in &config.output.formats {
            if f != "csv" && f != "json" {
                return Err(CliError::usage(format!("unknown output format `{f}` (csv, json)")));
            }
        }
        Ok(config)
    }

    /// Reads a config file; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let mut config = Self::parse(&text)?;
        if let (Some(data), Some(dir)) = (config.data.as_mut(), path.parent()) {
            if data.input.is_relative() {
                data.input = dir.join(&data.input);
            }
        }
        Ok(config)
    }

    pub fn model(&self) -> CliResult<&ModelSection> {
        self.model.as_ref().ok_or_else(|| CliError::usage("config has no [model] section"))
    }

    pub fn data(&self) -> CliResult<&DataSection> {
        self.data.as_ref().ok_or_else(|| CliError::usage("config has no [data] section"))
    }
}

impl ModelSection {
    pub fn coupling_kind(&self) -> CliResult<CouplingKind> {
        self.coupling.parse().map_err(|e: chmm::ChmmError| CliError::usage(e.to_string()))
    }

    pub fn families(&self) -> CliResult<Vec<EmissionFamily>> {
        if self.families.len() != self.num_chains {
            return Err(CliError::usage(format!(
                "model.families lists {} families for M = {}",
                self.families.len(),
                self.num_chains
            )));
        }
        self.families
            .iter()
            .map(|f| f.parse().map_err(|e: chmm::ChmmError| CliError::usage(e.to_string())))
            .collect()
    }

    /// Covariate column names per chain (empty lists when absent).
    pub fn covariate_columns(&self) -> CliResult<Vec<Vec<String>>> {
        if self.covariates.is_empty() {
            return Ok(vec![Vec::new(); self.num_chains]);
        }
        if self.covariates.len() != self.num_chains {
            return Err(CliError::usage(format!(
                "model.covariates has {} entries for M = {}",
                self.covariates.len(),
                self.num_chains
            )));
        }
        Ok(self.covariates.clone())
    }

    pub fn spec_with(&self, coupling: CouplingKind) -> CliResult<ModelSpec> {
        let spec = ModelSpec {
            space: StateSpace::new(self.num_chains, self.states_per_chain)?,
            coupling,
            families: self.families()?,
            num_covariates: self.covariate_columns()?.iter().map(Vec::len).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn spec(&self) -> CliResult<ModelSpec> {
        self.spec_with(self.coupling_kind()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
schema_version = 1
[model]
M = 2
N = 2
coupling = "cartesian_full"
families = ["normal", "normal"]
[data]
input = "obs.csv"
observation_columns = ["a", "b"]
"#;

    #[test]
    fn defaults_fill_optional_sections() {
        let c = RunConfig::parse(FULL).unwrap();
        assert_eq!(c.fit, FitSection::default());
        assert_eq!(c.data().unwrap().missing_marker, "NA");
        assert!(c.output.wants("csv"));
        let spec = c.model().unwrap().spec().unwrap();
        assert_eq!(spec.num_parameters(), 12 + 8);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::parse("schema_version = 2").is_err());
        assert!(RunConfig::parse(&FULL.replace("cartesian_full", "brand")).unwrap().model().unwrap().spec().is_err());
        assert!(RunConfig::parse(&format!("{FULL}\nunknown = 1")).is_err());
        let one_family = FULL.replace(r#"["normal", "normal"]"#, r#"["normal"]"#);
        assert!(RunConfig::parse(&one_family).unwrap().model().unwrap().spec().is_err());
    }
}
