//! Output files: model JSON and CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use chmm::inference::RestartRecord;
use chmm::numfmt::format_f64;
use chmm::{FitResult, Model, ModelSpec, ObservationSet, StatePath};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_error, CliError, CliResult};
use crate::ingest::DataLayout;

pub const MODEL_FORMAT: &str = "chmm-model";
pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const STATE_ORDER: &str =
    "mixed radix over chain states, chain 1 most significant; chain states are 1-based";

/// Self-describing fitted or hand-written model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub library_version: String,
    pub state_order: String,
    pub spec: ModelSpec,
    pub model: Model,
    /// CSV layout of the data the model was fitted to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_layout: Option<DataLayout>,
}

impl ModelFile {
    pub fn new(model: Model, data_layout: Option<DataLayout>) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            library_version: LIBRARY_VERSION.into(),
            state_order: STATE_ORDER.into(),
            spec: model.spec(),
            model,
            data_layout,
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        if file.format != MODEL_FORMAT {
            return Err(CliError::usage(format!(
                "{}: format `{}` is not `{MODEL_FORMAT}`",
                path.display(),
                file.format
            )));
        }
        file.model
            .validate()
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        if file.model.spec() != file.spec {
            return Err(CliError::usage(format!(
                "{}: spec does not match the model parameters",
                path.display()
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::usage(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

pub fn ensure_dir(dir: &Path) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    Ok(dir.to_path_buf())
}

/// Writes rows of string cells with a header.
pub fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let to_err = |e: csv::Error| CliError::usage(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn strings(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Observations (and covariates) under `layout`; missing values are written as the marker.
pub fn write_observations(path: &Path, times: &[String], layout: &DataLayout, data: &ObservationSet) -> CliResult<()> {
    let mut header = Vec::new();
    header.extend(layout.time_column.clone());
    header.extend(layout.observation_columns.iter().cloned());
    for cols in &layout.covariates {
        header.extend(cols.iter().cloned());
    }
    let rows = (0..data.len()).map(|t| {
        let mut row = Vec::with_capacity(header.len());
        if layout.time_column.is_some() {
            row.push(times[t].clone());
        }
        for m in 0..data.num_streams() {
            row.push(data.value(t, m).map_or_else(|| layout.missing_marker.clone(), format_f64));
        }
        for (m, cols) in layout.covariates.iter().enumerate() {
            if !cols.is_empty() {
                let cov = data.covariate_row(t, m).expect("layout matches data covariates");
                row.extend(cov.iter().map(|v| format_f64(*v)));
            }
        }
        row
    });
    write_table(path, &header, rows)
}

fn path_header(num_chains: usize, extra: &[&str]) -> Vec<String> {
    let mut header = vec!["time".to_string()];
    header.extend((1..=num_chains).map(|m| format!("chain_{m}_state")));
    header.push("product_state".into());
    header.extend(strings(extra));
    header
}

/// `time, chain_<m>_state..., product_state` with 1-based states.
pub fn write_true_path(path: &Path, times: &[String], per_chain: &[Vec<usize>], latent: &[usize]) -> CliResult<()> {
    let m = per_chain.first().map_or(0, Vec::len);
    let rows = per_chain.iter().zip(latent).enumerate().map(|(t, (states, k))| {
        let mut row = vec![times[t].clone()];
        row.extend(states.iter().map(usize::to_string));
        row.push((k + 1).to_string());
        row
    });
    write_table(path, &path_header(m, &[]), rows)
}

pub fn write_decoded(path: &Path, times: &[String], decoded: &StatePath) -> CliResult<()> {
    let m = decoded.per_chain.first().map_or(0, Vec::len);
    let max_post = decoded.max_posterior();
    let rows = (0..decoded.len()).map(|t| {
        let mut row = vec![times[t].clone()];
        row.extend(decoded.per_chain[t].iter().map(usize::to_string));
        row.push((decoded.global_path[t] + 1).to_string());
        row.push(format_f64(max_post[t]));
        row
    });
    write_table(path, &path_header(m, &["max_posterior"]), rows)
}

pub fn write_parameters(path: &Path, result: &FitResult) -> CliResult<()> {
    let rows = result.natural.iter().map(|p| {
        vec![
            p.name.clone(),
            format_f64(p.value),
            p.std_error.map_or_else(|| "NA".into(), format_f64),
        ]
    });
    write_table(path, &strings(&["name", "value", "std_error"]), rows)
}

pub fn write_restarts(path: &Path, restarts: &[RestartRecord]) -> CliResult<()> {
    let rows = restarts.iter().enumerate().map(|(i, r)| {
        vec![
            i.to_string(),
            r.seed.to_string(),
            format_f64(r.loglik),
            r.converged.to_string(),
            r.iterations.to_string(),
            serde_json::to_value(r.termination)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            format_f64(r.grad_norm),
        ]
    });
    let header = strings(&["restart", "seed", "loglik", "converged", "iterations", "termination", "grad_norm"]);
    write_table(path, &header, rows)
}

/// Summary written next to the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config_file: String,
    /// Effective configuration, command-line overrides applied.
    pub config: RunConfig,
    pub coupling: String,
    pub loglik: f64,
    pub aic: f64,
    pub num_parameters: usize,
    pub num_observations: usize,
    pub data_fingerprint: String,
    pub parameters: Vec<chmm::inference::NamedParameter>,
    pub restarts: Vec<RestartRecord>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn new(result: &FitResult, config_file: &Path, config: &RunConfig) -> Self {
        Self {
            config_file: config_file.display().to_string(),
            config: config.clone(),
            coupling: result.spec.coupling.to_string(),
            loglik: result.loglik,
            aic: result.aic,
            num_parameters: result.num_parameters(),
            num_observations: result.num_observations,
            data_fingerprint: format!("{:016x}", result.data_fingerprint),
            parameters: result.natural.clone(),
            restarts: result.restarts.clone(),
            warnings: result.warnings.clone(),
        }
    }
}
