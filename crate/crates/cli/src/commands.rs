//! Subcommand implementations. Each writes its human-readable report to `out`.

use std::io::Write;
use std::path::{Path, PathBuf};

use chmm::decoding::joint_decoding_error;
use chmm::numfmt::format_f64;
use chmm::simulation::{design, run_study, SimConfig};
use chmm::{
    compare_models, decode, decoding_error, disagreement_intervals, fit, forecast_score, simulate,
    CouplingKind, EmissionFamily, FitOptions, FitResult, Model, ModelSpec,
};

use crate::config::RunConfig;
use crate::density::{density_grid, DensityRow};
use crate::error::{io_error, CliError, CliResult};
use crate::ingest::{csv_headers, read_csv, read_state_path, DataLayout, Dataset};
use crate::output::{
    ensure_dir, write_decoded, write_json, write_observations, write_parameters, write_restarts,
    write_table, write_true_path, FitReport, ModelFile,
};

pub const DENSITY_POINTS: usize = 200;

fn emit(out: &mut dyn Write, text: impl AsRef<str>) -> CliResult<()> {
    out.write_all(text.as_ref().as_bytes())
        .map_err(|e| CliError::usage(format!("stdout: {e}")))
}

/// Output directory: the flag, else the config entry resolved against the config file.
fn output_dir(flag: Option<&Path>, config: &RunConfig, config_path: &Path) -> CliResult<PathBuf> {
    let dir = match flag {
        Some(d) => d.to_path_buf(),
        None if config.output.directory.is_relative() => config_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(&config.output.directory),
        None => config.output.directory.clone(),
    };
    ensure_dir(&dir)
}

/// Data described by a config file.
pub fn load_config_data(config: &RunConfig) -> CliResult<(DataLayout, Dataset)> {
    let model = config.model()?;
    let data = config.data()?;
    let layout = DataLayout::from_config(data, model)?;
    let families = model.families()?;
    let dataset = read_csv(&data.input, &layout, &families, config.fit.seed)?;
    Ok((layout, dataset))
}

/// Source of observations for commands that take a fitted model.
#[derive(Debug, Clone)]
pub enum DataSource {
    Config(PathBuf),
    File(PathBuf),
}

pub fn load_model_data(model: &ModelFile, source: &DataSource, seed: Option<u64>) -> CliResult<Dataset> {
    let spec = &model.spec;
    match source {
        DataSource::Config(path) => {
            let config = RunConfig::load(path)?;
            let data = config.data()?;
            let section = config.model()?;
            let layout = DataLayout::from_config(data, section)?;
            read_csv(&data.input, &layout, &spec.families, seed.unwrap_or(config.fit.seed))
        }
        DataSource::File(path) => {
            let layout = match &model.data_layout {
                Some(layout) => layout.clone(),
                None => {
                    let mut layout = DataLayout::standard(&spec.num_covariates);
                    if !csv_headers(path)?.iter().any(|h| h == "time") {
                        layout.time_column = None;
                    }
                    layout
                }
            };
            read_csv(path, &layout, &spec.families, seed.unwrap_or(1))
        }
    }
}

fn report_fit(out: &mut dyn Write, result: &FitResult) -> CliResult<()> {
    let converged = result.restarts.iter().filter(|r| r.converged).count();
    let mut s = String::new();
    s += &format!("coupling: {}\n", result.spec.coupling);
    s += &format!("observations: {}\n", result.num_observations);
    s += &format!("loglik: {}\n", format_f64(result.loglik));
    s += &format!("aic: {}\n", format_f64(result.aic));
    s += &format!("parameters: {}\n", result.num_parameters());
    s += &format!("restarts converged: {converged} of {}\n", result.restarts.len());
    s += &format!("{:<32} {:>14} {:>14}\n", "parameter", "estimate", "std. error");
    for p in &result.natural {
        let se = p.std_error.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        s += &format!("{:<32} {:>14.6} {:>14}\n", p.name, p.value, se);
    }
    for w in &result.warnings {
        s += &format!("warning: {w}\n");
    }
    emit(out, s)
}

#[derive(Debug, Clone, Default)]
pub struct FitArgs {
    pub config: PathBuf,
    pub coupling: Option<String>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_std_errors: bool,
}

fn fit_options(config: &RunConfig, restarts: Option<usize>, se: bool) -> FitOptions {
    FitOptions {
        restarts: restarts.unwrap_or(config.fit.restarts),
        seed: config.fit.seed,
        tolerance: config.fit.tolerance,
        max_iter: config.fit.max_iter,
        compute_std_errors: se,
        ..Default::default()
    }
}

pub fn run_fit(args: &FitArgs, out: &mut dyn Write) -> CliResult<FitResult> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.fit.seed = seed;
    }
    if let Some(restarts) = args.restarts {
        config.fit.restarts = restarts;
    }
    if let Some(model) = config.model.as_mut() {
        if let Some(k) = &args.coupling {
            model.coupling = k.clone();
        }
    }
    let section = config.model()?;
    let spec = match &args.coupling {
        Some(k) => section.spec_with(k.parse().map_err(|e: chmm::ChmmError| CliError::usage(e.to_string()))?)?,
        None => section.spec()?,
    };
    let (layout, dataset) = load_config_data(&config)?;
    let options = fit_options(&config, None, !args.no_std_errors);
    let result = fit(&spec, &dataset.data, &options)?;
    let dir = output_dir(args.out.as_deref(), &config, &args.config)?;
    if config.output.wants("json") {
        ModelFile::new(result.model.clone(), Some(layout)).save(&dir.join("model.json"))?;
        write_json(&dir.join("fit_report.json"), &FitReport::new(&result, &args.config, &config))?;
    }
    if config.output.wants("csv") {
        write_parameters(&dir.join("parameters.csv"), &result)?;
        write_restarts(&dir.join("restarts.csv"), &result.restarts)?;
        write_density(&dir.join("density_grid.csv"), &result.model, DENSITY_POINTS, None)?;
    }
    report_fit(out, &result)?;
    emit(out, format!("output: {}\n", dir.display()))?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct DecodeArgs {
    pub model: PathBuf,
    pub data: DataSource,
    pub truth: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// Returns the entry-level decoding error when a truth file is given.
pub fn run_decode(args: &DecodeArgs, out: &mut dyn Write) -> CliResult<Option<f64>> {
    let file = ModelFile::load(&args.model)?;
    let dataset = load_model_data(&file, &args.data, args.seed)?;
    let decoded = decode(&file.model, &dataset.data)?;
    let dir = ensure_dir(&args.out)?;
    write_decoded(&dir.join("decoded.csv"), &dataset.times, &decoded)?;
    let mut s = format!("time points: {}\n", decoded.len());
    if file.spec.space.num_chains() >= 2 {
        let d = disagreement_intervals(&decoded.per_chain)?;
        let spells = d.indices.iter().enumerate().filter(|(i, &t)| *i == 0 || d.indices[i - 1] + 1 != t).count();
        s += &format!(
            "chain disagreement: {} time points ({:.2}%) in {spells} intervals\n",
            d.indices.len(),
            100.0 * d.fraction
        );
    }
    let mut error = None;
    if let Some(truth_path) = &args.truth {
        let truth = read_state_path(truth_path, file.spec.space.num_chains())?;
        if truth.len() != decoded.len() {
            return Err(CliError::data(format!(
                "{}: {} rows for {} time points",
                truth_path.display(),
                truth.len(),
                decoded.len()
            )));
        }
        let entry = decoding_error(&decoded.per_chain, &truth)?;
        let joint = joint_decoding_error(&decoded.per_chain, &truth)?;
        s += &format!("decoding error (chain states): {entry:.3}%\n");
        s += &format!("decoding error (time points): {joint:.3}%\n");
        error = Some(entry);
    }
    s += &format!("output: {}\n", dir.join("decoded.csv").display());
    emit(out, s)?;
    Ok(error)
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub model: Option<PathBuf>,
    pub design: Option<String>,
    pub sd: f64,
    pub length: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn design_model(name: &str, sd: f64) -> CliResult<Model> {
    if !(sd.is_finite() && sd > 0.0) {
        return Err(CliError::usage(format!("--sd must be positive, got {sd}")));
    }
    match name {
        "coupled" => Ok(design::coupled_truth(sd)),
        "independent" => Ok(design::independent_truth(sd)),
        other => Err(CliError::usage(format!("unknown design `{other}` (coupled, independent)"))),
    }
}

pub fn run_simulate(args: &SimulateArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = match (&args.model, &args.design) {
        (Some(path), None) => ModelFile::load(path)?.model,
        (None, Some(name)) => design_model(name, args.sd)?,
        _ => return Err(CliError::usage("give exactly one of --model and --design")),
    };
    if model.spec().num_covariates.iter().any(|&p| p > 0) {
        return Err(CliError::usage("simulating regression streams needs covariate data; not supported here"));
    }
    if args.length == 0 {
        return Err(CliError::usage("--length must be positive"));
    }
    let sim = simulate(&model, args.length, args.seed)?;
    let dir = ensure_dir(&args.out)?;
    let times: Vec<String> = (1..=args.length).map(|t| t.to_string()).collect();
    let layout = DataLayout::standard(&model.spec().num_covariates);
    write_observations(&dir.join("observations.csv"), &times, &layout, &sim.data)?;
    write_true_path(&dir.join("true_path.csv"), &times, &sim.per_chain, &sim.path)?;
    ModelFile::new(model, Some(layout)).save(&dir.join("truth.json"))?;
    emit(out, format!("simulated {} time points (seed {})\noutput: {}\n", args.length, args.seed, dir.display()))
}

#[derive(Debug, Clone)]
pub struct ForecastArgs {
    pub model: PathBuf,
    pub data: DataSource,
    pub split: usize,
    pub seed: Option<u64>,
}

pub fn run_forecast(args: &ForecastArgs, out: &mut dyn Write) -> CliResult<f64> {
    let file = ModelFile::load(&args.model)?;
    let dataset = load_model_data(&file, &args.data, args.seed)?;
    let t = dataset.len();
    if args.split == 0 || args.split >= t {
        return Err(CliError::usage(format!("--split must lie in 1..{t}, got {}", args.split)));
    }
    let train = dataset.data.slice(0, args.split);
    let test = dataset.data.slice(args.split, t);
    let score = forecast_score(&file.model, &train, &test)?;
    emit(
        out,
        format!(
            "train: {}\ntest: {}\nforecast log score: {}\nper time point: {}\n",
            args.split,
            t - args.split,
            format_f64(score),
            format_f64(score / (t - args.split) as f64)
        ),
    )?;
    Ok(score)
}

#[derive(Debug, Clone, Default)]
pub struct SimstudyArgs {
    pub config: PathBuf,
    pub replications: Option<usize>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn run_simstudy(args: &SimstudyArgs, out: &mut dyn Write) -> CliResult<chmm::SimReport> {
    let config = RunConfig::load(&args.config)?;
    let sim = config
        .simulation
        .clone()
        .ok_or_else(|| CliError::usage("config has no [simulation] section"))?;
    let truth = design_model(&sim.design, sim.sd)?;
    let space = truth.space();
    let competing = sim
        .competing
        .iter()
        .map(|k| {
            let kind: CouplingKind = k.parse().map_err(|e: chmm::ChmmError| CliError::usage(e.to_string()))?;
            ModelSpec::uniform(space.num_chains(), space.states_per_chain(), kind, EmissionFamily::Normal)
                .map_err(CliError::from)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let study = SimConfig {
        truth,
        t_train: sim.t_train,
        t_test: sim.t_test,
        replications: args.replications.unwrap_or(sim.replications),
        seed: args.seed.unwrap_or(config.fit.seed),
        competing,
        restarts: args.restarts.unwrap_or(sim.restarts),
        tolerance: config.fit.tolerance,
        max_iter: config.fit.max_iter,
    };
    let report = run_study(&study)?;
    let dir = output_dir(args.out.as_deref(), &config, &args.config)?;
    let csv_path = dir.join("simstudy.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| io_error(&csv_path, e))?;
    report
        .write_csv(std::io::BufWriter::new(file))
        .map_err(|e| io_error(&csv_path, e))?;
    let text = report.summary_text();
    let summary_path = dir.join("simstudy_summary.txt");
    std::fs::write(&summary_path, &text).map_err(|e| io_error(&summary_path, e))?;
    for d in &report.dropped {
        log::warn!("replication {} dropped: {}", d.replication + 1, d.reason);
    }
    emit(out, format!("{text}output: {}\n", dir.display()))?;
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct SelectArgs {
    pub config: PathBuf,
    pub couplings: Option<Vec<String>>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Coupling kinds that are distinct for `num_chains` chains; with one chain the
/// coupled kinds collapse onto the plain transition matrix.
pub fn candidate_kinds(num_chains: usize) -> Vec<CouplingKind> {
    if num_chains == 1 {
        vec![CouplingKind::CartesianFull]
    } else {
        CouplingKind::ALL.to_vec()
    }
}

pub fn run_select(args: &SelectArgs, out: &mut dyn Write) -> CliResult<Vec<chmm::inference::RankedModel>> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.fit.seed = seed;
    }
    let section = config.model()?;
    let kinds = match &args.couplings {
        Some(list) => list
            .iter()
            .map(|k| k.parse().map_err(|e: chmm::ChmmError| CliError::usage(e.to_string())))
            .collect::<CliResult<Vec<CouplingKind>>>()?,
        None => candidate_kinds(section.num_chains),
    };
    let (_, dataset) = load_config_data(&config)?;
    let options = fit_options(&config, args.restarts, false);
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for kind in kinds {
        let spec = section.spec_with(kind)?;
        match fit(&spec, &dataset.data, &options) {
            Ok(r) => results.push(r),
            Err(e) => {
                log::warn!("{kind}: {e}");
                failures.push((kind, CliError::from(e)));
            }
        }
    }
    if results.is_empty() {
        return Err(failures
            .into_iter()
            .next()
            .map(|(_, e)| e)
            .unwrap_or_else(|| CliError::usage("no coupling kinds to compare")));
    }
    let ranking = compare_models(&results)?;
    let dir = output_dir(args.out.as_deref(), &config, &args.config)?;
    let header: Vec<String> = ["rank", "coupling", "loglik", "num_parameters", "aic", "delta_aic"]
        .map(String::from)
        .to_vec();
    let rows = ranking.iter().map(|r| {
        vec![
            r.rank.to_string(),
            r.coupling.to_string(),
            format_f64(r.loglik),
            r.num_parameters.to_string(),
            format_f64(r.aic),
            format_f64(r.delta_aic),
        ]
    });
    write_table(&dir.join("selection.csv"), &header, rows)?;
    let mut s = format!("{:<5} {:<20} {:>14} {:>6} {:>14} {:>10}\n", "rank", "coupling", "loglik", "params", "aic", "delta");
    for r in &ranking {
        s += &format!(
            "{:<5} {:<20} {:>14.3} {:>6} {:>14.3} {:>10.3}\n",
            r.rank, r.coupling.as_str(), r.loglik, r.num_parameters, r.aic, r.delta_aic
        );
    }
    for (kind, e) in &failures {
        s += &format!("failed: {kind}: {e}\n");
    }
    s += &format!("output: {}\n", dir.join("selection.csv").display());
    emit(out, s)?;
    Ok(ranking)
}

#[derive(Debug, Clone)]
pub struct DensityArgs {
    pub model: PathBuf,
    pub points: usize,
    pub range: Option<(f64, f64)>,
    pub out: PathBuf,
}

fn write_density(path: &Path, model: &Model, points: usize, range: Option<(f64, f64)>) -> CliResult<Vec<DensityRow>> {
    let rows = density_grid(model, points, range)?;
    let header: Vec<String> = DensityRow::HEADER.map(String::from).to_vec();
    write_table(path, &header, rows.iter().map(DensityRow::cells))?;
    Ok(rows)
}

pub fn run_density(args: &DensityArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = ModelFile::load(&args.model)?;
    let dir = ensure_dir(&args.out)?;
    let path = dir.join("density_grid.csv");
    let rows = write_density(&path, &file.model, args.points, args.range)?;
    emit(out, format!("{} grid rows\noutput: {}\n", rows.len(), path.display()))
}
