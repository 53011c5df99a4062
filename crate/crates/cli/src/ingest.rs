//! CSV ingestion into an [`ObservationSet`].

use std::path::Path;

use chmm::emissions::shift_zeros;
use chmm::inference::derive_seed;
use chmm::{Covariates, EmissionFamily, ObservationSet};
use serde::{Deserialize, Serialize};

use crate::config::{DataSection, ModelSection};
use crate::error::{CliError, CliResult};

/// Which CSV columns feed which part of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataLayout {
    pub time_column: Option<String>,
    pub observation_columns: Vec<String>,
    /// Covariate columns per chain.
    pub covariates: Vec<Vec<String>>,
    pub missing_marker: String,
}

impl DataLayout {
    pub fn from_config(data: &DataSection, model: &ModelSection) -> CliResult<Self> {
        let layout = Self {
            time_column: data.time_column.clone(),
            observation_columns: data.observation_columns.clone(),
            covariates: model.covariate_columns()?,
            missing_marker: data.missing_marker.clone(),
        };
        if layout.observation_columns.len() != model.num_chains {
            return Err(CliError::usage(format!(
                "data.observation_columns lists {} columns for M = {}",
                layout.observation_columns.len(),
                model.num_chains
            )));
        }
        Ok(layout)
    }

    /// Layout written by this tool: `time`, `y1..yM`, then `x{m}_{j}` covariates.
    pub fn standard(covariates_per_chain: &[usize]) -> Self {
        Self {
            time_column: Some("time".into()),
            observation_columns: (1..=covariates_per_chain.len()).map(|m| format!("y{m}")).collect(),
            covariates: covariates_per_chain
                .iter()
                .enumerate()
                .map(|(m, &p)| (1..=p).map(|j| format!("x{}_{j}", m + 1)).collect())
                .collect(),
            missing_marker: "NA".into(),
        }
    }
}

/// Ingested data with the original time labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub times: Vec<String>,
    pub data: ObservationSet,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn read_csv(path: &Path, layout: &DataLayout, families: &[EmissionFamily], seed: u64) -> CliResult<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    parse_csv(file, &path.display().to_string(), layout, families, seed)
}

/// Parses CSV text. Empty cells and `missing_marker` cells are missing; exact zeros in beta
/// columns are shifted into (1e-8, 1e-6) reproducibly from `seed`.
pub fn parse_csv<R: std::io::Read>(
    reader: R,
    source: &str,
    layout: &DataLayout,
    families: &[EmissionFamily],
    seed: u64,
) -> CliResult<Dataset> {
    let m_count = layout.observation_columns.len();
    if families.len() != m_count || layout.covariates.len() != m_count {
        return Err(CliError::usage(format!(
            "data layout has {m_count} observation columns but {} families and {} covariate lists",
            families.len(),
            layout.covariates.len()
        )));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::data(format!("{source}: {e}")))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::data(format!("{source}: column `{name}` not found")))
    };
    let time_idx = layout.time_column.as_deref().map(find).transpose()?;
    let obs_idx: Vec<usize> = layout.observation_columns.iter().map(|c| find(c)).collect::<CliResult<_>>()?;
    let cov_idx: Vec<Vec<usize>> = layout
        .covariates
        .iter()
        .map(|cols| cols.iter().map(|c| find(c)).collect::<CliResult<Vec<_>>>())
        .collect::<CliResult<_>>()?;

    let mut times = Vec::new();
    let mut last_time: Option<f64> = None;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); m_count];
    let mut cov_rows: Vec<Vec<f64>> = vec![Vec::new(); m_count];
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| CliError::data(format!("{source}: row {row}: {e}")))?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let number = |i: usize| -> CliResult<Option<f64>> {
            let raw = cell(i);
            if raw.is_empty() || raw == layout.missing_marker {
                return Ok(None);
            }
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(CliError::data(format!(
                    "{source}: row {row}, column `{}`: cannot parse `{raw}` as a finite number",
                    &headers[i]
                ))),
            }
        };
        match time_idx {
            Some(i) => {
                let t = number(i)?.ok_or_else(|| {
                    CliError::data(format!("{source}: row {row}: missing time value"))
                })?;
                if last_time.is_some_and(|prev| t <= prev) {
                    return Err(CliError::data(format!(
                        "{source}: row {row}: time column must be strictly increasing"
                    )));
                }
                last_time = Some(t);
                times.push(cell(i).to_string());
            }
            None => times.push(row.to_string()),
        }
        for m in 0..m_count {
            columns[m].push(number(obs_idx[m])?.unwrap_or(f64::NAN));
            for &i in &cov_idx[m] {
                let v = number(i)?.ok_or_else(|| {
                    CliError::data(format!(
                        "{source}: row {row}, column `{}`: covariates must be complete",
                        &headers[i]
                    ))
                })?;
                cov_rows[m].push(v);
            }
        }
    }
    if times.is_empty() {
        return Err(CliError::data(format!("{source}: no data rows")));
    }
    for (m, family) in families.iter().enumerate() {
        if *family == EmissionFamily::Beta {
            columns[m] = shift_zeros(&columns[m], derive_seed(seed, m as u64))
                .map_err(|e| CliError::data(format!("{source}: column `{}`: {e}", layout.observation_columns[m])))?;
        }
    }
    let rows: Vec<Vec<Option<f64>>> = (0..times.len())
        .map(|t| {
            columns
                .iter()
                .map(|c| Some(c[t]).filter(|v| !v.is_nan()))
                .collect()
        })
        .collect();
    let covariates = layout
        .covariates
        .iter()
        .zip(cov_rows)
        .map(|(cols, values)| {
            if cols.is_empty() {
                Ok(None)
            } else {
                Covariates::new(cols.len(), values).map(Some)
            }
        })
        .collect::<chmm::Result<Vec<_>>>()
        .map_err(|e| CliError::data(format!("{source}: {e}")))?;
    let data = ObservationSet::from_rows(&rows, covariates).map_err(|e| CliError::data(format!("{source}: {e}")))?;
    Ok(Dataset { times, data })
}

/// Column names of a CSV file.
pub fn csv_headers(path: &Path) -> CliResult<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(headers.iter().map(|h| h.trim().to_string()).collect())
}

/// Per-chain 1-based states from a path file with `chain_<m>_state` columns.
pub fn read_state_path(path: &Path, num_chains: usize) -> CliResult<Vec<Vec<usize>>> {
    let source = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::data(format!("{source}: {e}")))?;
    let headers = rdr.headers().map_err(|e| CliError::data(format!("{source}: {e}")))?.clone();
    let idx: Vec<usize> = (1..=num_chains)
        .map(|m| {
            let name = format!("chain_{m}_state");
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::data(format!("{source}: column `{name}` not found")))
        })
        .collect::<CliResult<_>>()?;
    let mut out = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| CliError::data(format!("{source}: row {}: {e}", r + 1)))?;
        let row = idx
            .iter()
            .map(|&i| {
                let raw = record.get(i).unwrap_or("");
                raw.parse::<usize>().map_err(|_| {
                    CliError::data(format!("{source}: row {}, column `{}`: bad state `{raw}`", r + 1, &headers[i]))
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}
