//! Sampling, out-of-sample forecast scores and the misspecification study harness.

use std::fmt::Write as _;
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::CouplingKind;
use crate::decoding::{decoding_error, joint_decoding_error, per_chain_states, viterbi};
use crate::emissions::{linear_predictor, Covariates, ObservationSet, StateDensity};
use crate::error::{ChmmError, Result};
use crate::inference::{derive_seed, fit, log_likelihood, FitOptions};
use crate::model::{Model, ModelSpec};
use crate::numfmt::format_f64;

/// A simulated series with its true latent path.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: ObservationSet,
    /// Latent-state index per time step (0-based).
    pub path: Vec<usize>,
    /// Chain states per time step, `[t][m]`, 1-based.
    pub per_chain: Vec<Vec<usize>>,
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final cumulative sum: take the last positive entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws a series of length `len` from `model`. Regression streams need covariates.
pub fn simulate(model: &Model, len: usize, seed: u64) -> Result<Simulated> {
    let covariates = vec![None; model.space().num_chains()];
    simulate_with_covariates(model, len, covariates, seed)
}

pub fn simulate_with_covariates(
    model: &Model,
    len: usize,
    covariates: Vec<Option<Covariates>>,
    seed: u64,
) -> Result<Simulated> {
    model.validate()?;
    let m_count = model.space().num_chains();
    if covariates.len() != m_count {
        return Err(ChmmError::Shape(format!(
            "{} covariate slots for {m_count} streams",
            covariates.len()
        )));
    }
    for (m, e) in model.emissions().streams().iter().enumerate() {
        let p = e.num_covariates();
        match &covariates[m] {
            None if p > 0 => {
                return Err(ChmmError::Data(format!(
                    "stream {} is a regression on {p} covariates but none were supplied",
                    m + 1
                )))
            }
            Some(c) if c.num() != p || c.len() != len => {
                return Err(ChmmError::Shape(format!(
                    "stream {} covariates are {}×{}, expected {len}×{p}",
                    m + 1,
                    c.len(),
                    c.num()
                )))
            }
            _ => {}
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = model.stationary()?;
    let gamma = model.tpm();
    let map = model.state_map();
    let mut path = Vec::with_capacity(len);
    let mut rows = Vec::with_capacity(len);
    for t in 0..len {
        let k = if t == 0 {
            sample_index(delta.probs(), &mut rng)
        } else {
            sample_index(gamma.row(path[t - 1]), &mut rng)
        };
        path.push(k);
        let row: Vec<Option<f64>> = (0..m_count)
            .map(|m| {
                let e = model.emissions().stream(m);
                let x = covariates[m].as_ref().map(|c| c.row(t));
                Some(draw(e.state(map.state_of(k, m)), x, &mut rng))
            })
            .collect();
        rows.push(row);
    }
    let data = ObservationSet::from_rows(&rows, covariates)?;
    Ok(Simulated {
        per_chain: per_chain_states(model, &path),
        data,
        path,
    })
}

fn draw<R: Rng + ?Sized>(state: StateDensity<'_>, x: Option<&[f64]>, rng: &mut R) -> f64 {
    match state {
        StateDensity::Normal(p) => Normal::new(p.mean, p.sd).expect("validated sd").sample(rng),
        StateDensity::Beta(p) => {
            // Keep draws strictly inside (0, 1) where the density is defined.
            let y: f64 = Beta::new(p.alpha, p.beta).expect("validated shapes").sample(rng);
            y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
        }
        StateDensity::NormalRegression(p, scaling) => {
            let mean = linear_predictor(p, scaling, x);
            Normal::new(mean, p.sd).expect("validated sd").sample(rng)
        }
    }
}

/// Conditional log-likelihood of `test` given `train`: `ℓ(train ⧺ test) − ℓ(train)`.
pub fn forecast_score(model: &Model, train: &ObservationSet, test: &ObservationSet) -> Result<f64> {
    if test.is_empty() {
        return Ok(0.0);
    }
    let joint = train.concat(test)?;
    let score = log_likelihood(model, &joint)? - log_likelihood(model, train)?;
    if !score.is_finite() {
        return Err(ChmmError::Numeric(format!("forecast score is {score}")));
    }
    Ok(score)
}

/// The two-chain, two-state normal design of the misspecification study.
pub mod design {
    use crate::coupling::{CouplingKind, CouplingSpec};
    use crate::emissions::{ChainEmissions, EmissionFamily, EmissionSpec, NormalParams};
    use crate::model::{Model, ModelSpec};
    use crate::state_space::StateSpace;
    use crate::tpm::TransitionMatrix;

    /// Product-state transition matrix; states ordered (1,1), (1,2), (2,1), (2,2).
    pub const COUPLED_TPM: [[f64; 4]; 4] = [
        [0.90, 0.02, 0.02, 0.06],
        [0.09, 0.80, 0.02, 0.09],
        [0.09, 0.02, 0.80, 0.09],
        [0.06, 0.02, 0.02, 0.90],
    ];

    pub const CHAIN1_MEANS: [f64; 2] = [2.0, 6.0];
    pub const CHAIN2_MEANS: [f64; 2] = [2.0, 5.0];

    /// Competing formulations fitted in the study, in reporting order.
    pub const COMPETING: [CouplingKind; 3] = [
        CouplingKind::CartesianFull,
        CouplingKind::SingleChain,
        CouplingKind::IndependentChains,
    ];

    fn emissions(sd: f64) -> EmissionSpec {
        let chain = |means: [f64; 2]| ChainEmissions::Normal {
            states: means.iter().map(|&mean| NormalParams { mean, sd }).collect(),
        };
        EmissionSpec::new(vec![chain(CHAIN1_MEANS), chain(CHAIN2_MEANS)]).unwrap()
    }

    /// The coupled truth with common emission standard deviation `sd`.
    pub fn coupled_truth(sd: f64) -> Model {
        let rows: Vec<Vec<f64>> = COUPLED_TPM.iter().map(|r| r.to_vec()).collect();
        Model::new(
            StateSpace::new(2, 2).unwrap(),
            CouplingSpec::CartesianFull {
                tpm: TransitionMatrix::from_rows(&rows).unwrap(),
            },
            emissions(sd),
        )
        .unwrap()
    }

    /// Two uncoupled chains with the same emissions as [`coupled_truth`].
    pub fn independent_truth(sd: f64) -> Model {
        let tpm = |stay: f64| {
            TransitionMatrix::from_rows(&[vec![stay, 1.0 - stay], vec![1.0 - stay, stay]]).unwrap()
        };
        Model::new(
            StateSpace::new(2, 2).unwrap(),
            CouplingSpec::IndependentChains {
                tpms: vec![tpm(0.9), tpm(0.85)],
            },
            emissions(sd),
        )
        .unwrap()
    }

    pub fn competing_specs() -> Vec<ModelSpec> {
        COMPETING
            .iter()
            .map(|&kind| ModelSpec::uniform(2, 2, kind, EmissionFamily::Normal).unwrap())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub truth: Model,
    pub t_train: usize,
    pub t_test: usize,
    pub replications: usize,
    pub seed: u64,
    pub competing: Vec<ModelSpec>,
    /// Restarts per fit.
    pub restarts: usize,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl SimConfig {
    /// The study design with `replications` runs and standard deviation `sd`.
    pub fn study(sd: f64, replications: usize, seed: u64) -> Self {
        Self {
            truth: design::coupled_truth(sd),
            t_train: 1000,
            t_test: 100,
            replications,
            seed,
            competing: design::competing_specs(),
            restarts: 5,
            tolerance: 1e-6,
            max_iter: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_train == 0 || self.t_test == 0 || self.replications == 0 {
            return Err(ChmmError::Domain(
                "t_train, t_test and replications must all be at least 1".into(),
            ));
        }
        if self.competing.is_empty() {
            return Err(ChmmError::Domain("no competing specifications".into()));
        }
        for spec in &self.competing {
            spec.validate()?;
            if spec.space != *self.truth.space() {
                return Err(ChmmError::Shape(format!(
                    "competing {} spec has a different state space than the truth",
                    spec.coupling
                )));
            }
        }
        self.truth.validate()
    }
}

/// One fitted specification in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub replication: usize,
    pub coupling: CouplingKind,
    pub loglik: f64,
    pub aic: f64,
    pub train_error: f64,
    pub test_error: f64,
    pub train_joint_error: f64,
    pub test_joint_error: f64,
    pub forecast_score: f64,
    /// Fitted state means `[m][s]` after ordering.
    pub means: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedReplication {
    pub replication: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecSummary {
    pub coupling: CouplingKind,
    pub mean_train_error: f64,
    pub mean_test_error: f64,
    pub mean_train_joint_error: f64,
    pub mean_test_joint_error: f64,
    /// Fraction of replications in which this spec had the largest forecast score.
    pub win_rate: f64,
    /// Fraction of replications in which this spec had the smallest AIC.
    pub aic_win_rate: f64,
    /// Average fitted state means `[m][s]`.
    pub mean_state_means: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub t_train: usize,
    pub t_test: usize,
    pub seed: u64,
    pub restarts: usize,
    pub requested: usize,
    pub rows: Vec<ReplicationRow>,
    pub dropped: Vec<DroppedReplication>,
    pub summaries: Vec<SpecSummary>,
    /// Replications whose forecast winner was decided by the earliest-listed tie rule.
    pub forecast_ties: usize,
}

impl SimReport {
    pub fn completed(&self) -> usize {
        self.requested - self.dropped.len()
    }

    pub fn summary(&self, kind: CouplingKind) -> Option<&SpecSummary> {
        self.summaries.iter().find(|s| s.coupling == kind)
    }

    pub fn write_csv<W: io::Write>(&self, mut out: W) -> io::Result<()> {
        let m = self.rows.first().map_or(0, |r| r.means.len());
        let n = self.rows.first().and_then(|r| r.means.first()).map_or(0, Vec::len);
        let mut header = String::from(
            "replication,coupling,loglik,aic,train_error,test_error,train_joint_error,test_joint_error,forecast_score",
        );
        for mm in 1..=m {
            for s in 1..=n {
                write!(header, ",mean_{mm}_{s}").unwrap();
            }
        }
        writeln!(out, "{header}")?;
        for r in &self.rows {
            let mut line = format!("{},{}", r.replication + 1, r.coupling);
            for v in [
                r.loglik,
                r.aic,
                r.train_error,
                r.test_error,
                r.train_joint_error,
                r.test_joint_error,
                r.forecast_score,
            ] {
                write!(line, ",{}", format_f64(v)).unwrap();
            }
            for v in r.means.iter().flatten() {
                write!(line, ",{}", format_f64(*v)).unwrap();
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Plain-text table with one column per competing specification.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "replications: {} completed of {} (T_train = {}, T_test = {}, restarts = {}, seed = {})",
            self.completed(),
            self.requested,
            self.t_train,
            self.t_test,
            self.restarts,
            self.seed
        )
        .unwrap();
        write!(s, "{:<28}", "").unwrap();
        for sm in &self.summaries {
            write!(s, "{:>20}", sm.coupling.as_str()).unwrap();
        }
        s.push('\n');
        let mut line = |label: &str, f: &dyn Fn(&SpecSummary) -> f64| {
            write!(s, "{label:<28}").unwrap();
            for sm in &self.summaries {
                write!(s, "{:>20.1}", f(sm)).unwrap();
            }
            s.push('\n');
        };
        line("decoding error, train (%)", &|x| x.mean_train_error);
        line("decoding error, test (%)", &|x| x.mean_test_error);
        line("joint error, train (%)", &|x| x.mean_train_joint_error);
        line("joint error, test (%)", &|x| x.mean_test_joint_error);
        line("best forecast (%)", &|x| 100.0 * x.win_rate);
        line("lowest AIC (%)", &|x| 100.0 * x.aic_win_rate);
        if self.forecast_ties > 0 {
            writeln!(s, "forecast ties resolved to earliest spec: {}", self.forecast_ties).unwrap();
        }
        s
    }
}

fn fit_one(
    spec: &ModelSpec,
    sim: &Simulated,
    config: &SimConfig,
    replication: usize,
    seed: u64,
) -> Result<ReplicationRow> {
    let train = sim.data.slice(0, config.t_train);
    let test = sim.data.slice(config.t_train, sim.data.len());
    let options = FitOptions {
        restarts: config.restarts,
        seed,
        tolerance: config.tolerance,
        max_iter: config.max_iter,
        compute_std_errors: false,
        ..Default::default()
    };
    let result = fit(spec, &train, &options)?;
    let model = &result.model;
    let train_path = per_chain_states(model, &viterbi(model, &train)?);
    let test_path = per_chain_states(model, &viterbi(model, &test)?);
    let (true_train, true_test) = sim.per_chain.split_at(config.t_train);
    let n = model.space().states_per_chain();
    Ok(ReplicationRow {
        replication,
        coupling: spec.coupling,
        loglik: result.loglik,
        aic: result.aic,
        train_error: decoding_error(&train_path, true_train)?,
        test_error: decoding_error(&test_path, true_test)?,
        train_joint_error: joint_decoding_error(&train_path, true_train)?,
        test_joint_error: joint_decoding_error(&test_path, true_test)?,
        forecast_score: forecast_score(model, &train, &test)?,
        means: model
            .emissions()
            .streams()
            .iter()
            .map(|e| (0..n).map(|s| e.state_mean(s)).collect())
            .collect(),
    })
}

/// Runs every replication (in parallel) and aggregates. Replications where any
/// competing spec fails are dropped for all specs.
pub fn run_study(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let outcomes: Vec<std::result::Result<Vec<ReplicationRow>, DroppedReplication>> = (0
        ..config.replications)
        .into_par_iter()
        .map(|r| {
            let rep_seed = derive_seed(config.seed, r as u64);
            let drop = |reason: String| DroppedReplication { replication: r, reason };
            let sim = simulate(&config.truth, config.t_train + config.t_test, rep_seed)
                .map_err(|e| drop(e.to_string()))?;
            config
                .competing
                .iter()
                .enumerate()
                .map(|(i, spec)| {
                    fit_one(spec, &sim, config, r, derive_seed(rep_seed, i as u64 + 1))
                        .map_err(|e| drop(format!("{}: {e}", spec.coupling)))
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => rows.push(r),
            Err(d) => dropped.push(d),
        }
    }
    for d in &dropped {
        log::warn!("replication {} dropped: {}", d.replication + 1, d.reason);
    }

    let n_specs = config.competing.len();
    let mut wins = vec![0usize; n_specs];
    let mut aic_wins = vec![0usize; n_specs];
    let mut ties = 0;
    for rep in &rows {
        let best = rep.iter().map(|r| r.forecast_score).fold(f64::NEG_INFINITY, f64::max);
        let first = rep.iter().position(|r| r.forecast_score == best).unwrap();
        if rep.iter().filter(|r| r.forecast_score == best).count() > 1 {
            ties += 1;
        }
        wins[first] += 1;
        let best_aic = rep.iter().map(|r| r.aic).fold(f64::INFINITY, f64::min);
        aic_wins[rep.iter().position(|r| r.aic == best_aic).unwrap()] += 1;
    }

    let completed = rows.len().max(1) as f64;
    let summaries = config
        .competing
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let col: Vec<&ReplicationRow> = rows.iter().map(|rep| &rep[i]).collect();
            let avg = |f: &dyn Fn(&ReplicationRow) -> f64| col.iter().map(|r| f(r)).sum::<f64>() / completed;
            let shape = col.first().map(|r| r.means.clone()).unwrap_or_default();
            let mean_state_means = shape
                .iter()
                .enumerate()
                .map(|(m, row)| {
                    (0..row.len())
                        .map(|s| avg(&|r: &ReplicationRow| r.means[m][s]))
                        .collect()
                })
                .collect();
            SpecSummary {
                coupling: spec.coupling,
                mean_train_error: avg(&|r| r.train_error),
                mean_test_error: avg(&|r| r.test_error),
                mean_train_joint_error: avg(&|r| r.train_joint_error),
                mean_test_joint_error: avg(&|r| r.test_joint_error),
                win_rate: wins[i] as f64 / completed,
                aic_win_rate: aic_wins[i] as f64 / completed,
                mean_state_means,
            }
        })
        .collect();

    Ok(SimReport {
        t_train: config.t_train,
        t_test: config.t_test,
        seed: config.seed,
        restarts: config.restarts,
        requested: config.replications,
        rows: rows.into_iter().flatten().collect(),
        dropped,
        summaries,
        forecast_ties: ties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emissions::{ChainEmissions, EmissionSpec, NormalParams};
    use crate::state_space::StateSpace;
    use crate::coupling::CouplingSpec;
    use crate::tpm::TransitionMatrix;

    #[test]
    fn identical_seeds_reproduce() {
        let truth = design::coupled_truth(1.5);
        let a = simulate(&truth, 200, 9).unwrap();
        let b = simulate(&truth, 200, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data, simulate(&truth, 200, 10).unwrap().data);
    }

    #[test]
    fn near_deterministic_emissions_hit_means() {
        let mut truth = design::coupled_truth(1e-6);
        truth = truth.clone();
        let sim = simulate(&truth, 500, 3).unwrap();
        for t in 0..500 {
            let s = &sim.per_chain[t];
            assert!((sim.data.value(t, 0).unwrap() - design::CHAIN1_MEANS[s[0] - 1]).abs() < 1e-3);
            assert!((sim.data.value(t, 1).unwrap() - design::CHAIN2_MEANS[s[1] - 1]).abs() < 1e-3);
        }
    }

    #[test]
    fn one_state_forecast_ignores_training_data() {
        let model = Model::new(
            StateSpace::new(1, 1).unwrap(),
            CouplingSpec::CartesianFull { tpm: TransitionMatrix::identity(1) },
            EmissionSpec::new(vec![ChainEmissions::Normal {
                states: vec![NormalParams { mean: 1.0, sd: 2.0 }],
            }])
            .unwrap(),
        )
        .unwrap();
        let train = ObservationSet::from_complete(&[vec![0.0], vec![3.0]]).unwrap();
        let test = ObservationSet::from_complete(&[vec![1.5], vec![-1.0]]).unwrap();
        let oracle = crate::emissions::normal_ln_pdf(1.5, 1.0, 2.0)
            + crate::emissions::normal_ln_pdf(-1.0, 1.0, 2.0);
        assert!((forecast_score(&model, &train, &test).unwrap() - oracle).abs() < 1e-12);
        let empty = train.slice(0, 0);
        assert_eq!(forecast_score(&model, &train, &empty).unwrap(), 0.0);
    }

    #[test]
    fn single_replication_report() {
        let mut config = SimConfig::study(1.5, 1, 4);
        config.t_train = 300;
        config.t_test = 50;
        config.restarts = 2;
        let report = run_study(&config).unwrap();
        assert_eq!(report.rows.len() + 3 * report.dropped.len(), 3);
        let total: f64 = report.summaries.iter().map(|s| s.win_rate).sum();
        assert!((total - 1.0).abs() < 1e-12 || report.completed() == 0);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + report.rows.len());
    }
}
