//! State-dependent observation densities.
//!
//! Streams are conditionally independent given the latent state, so the log
//! emission of a latent state is the sum of per-stream log densities. Missing
//! observations contribute a factor of one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{ChmmError, Result};
use crate::state_space::StateSpace;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionFamily {
    Normal,
    Beta,
    NormalRegression,
}

impl EmissionFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            EmissionFamily::Normal => "normal",
            EmissionFamily::Beta => "beta",
            EmissionFamily::NormalRegression => "normal_regression",
        }
    }
}

impl std::str::FromStr for EmissionFamily {
    type Err = ChmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(EmissionFamily::Normal),
            "beta" => Ok(EmissionFamily::Beta),
            "normal_regression" => Ok(EmissionFamily::NormalRegression),
            other => Err(ChmmError::Domain(format!(
                "unknown emission family `{other}` (expected normal, beta or normal_regression)"
            ))),
        }
    }
}

impl std::fmt::Display for EmissionFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalParams {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Intercept first, then one slope per covariate (on the scaled covariates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionParams {
    pub coefs: Vec<f64>,
    pub sd: f64,
}

/// Affine map applied to raw covariates before the linear predictor.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateScaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl CovariateScaling {
    pub fn identity(p: usize) -> Self {
        Self {
            center: vec![0.0; p],
            scale: vec![1.0; p],
        }
    }

    /// Zero-mean, unit-variance scaling estimated from the rows of `cov`.
    pub fn standardizing(cov: &Covariates) -> Self {
        let p = cov.num();
        let rows: Vec<&[f64]> = (0..cov.len()).map(|t| cov.row(t)).collect();
        let n = rows.len().max(1) as f64;
        let center: Vec<f64> = (0..p)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let scale = (0..p)
            .map(|j| {
                let v = rows.iter().map(|r| (r[j] - center[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { center, scale }
    }

    fn apply(&self, j: usize, x: f64) -> f64 {
        match (self.center.get(j), self.scale.get(j)) {
            (Some(c), Some(s)) => (x - c) / s,
            _ => x,
        }
    }
}

/// Per-state parameters of one observation stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ChainEmissions {
    Normal {
        states: Vec<NormalParams>,
    },
    Beta {
        states: Vec<BetaParams>,
    },
    NormalRegression {
        states: Vec<RegressionParams>,
        #[serde(default)]
        scaling: CovariateScaling,
    },
}

/// Parameters of a single state, borrowed from a [`ChainEmissions`].
#[derive(Debug, Clone, Copy)]
pub enum StateDensity<'a> {
    Normal(&'a NormalParams),
    Beta(&'a BetaParams),
    NormalRegression(&'a RegressionParams, &'a CovariateScaling),
}

/// Natural-log density at `y`. Returns −∞ outside the support.
pub fn log_density(params: StateDensity<'_>, y: f64, covariates: Option<&[f64]>) -> f64 {
    match params {
        StateDensity::Normal(p) => normal_ln_pdf(y, p.mean, p.sd),
        StateDensity::Beta(p) => beta_ln_pdf(y, p.alpha, p.beta),
        StateDensity::NormalRegression(p, scaling) => {
            normal_ln_pdf(y, linear_predictor(p, scaling, covariates), p.sd)
        }
    }
}

pub fn normal_ln_pdf(y: f64, mean: f64, sd: f64) -> f64 {
    let z = (y - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

pub fn beta_ln_pdf(y: f64, alpha: f64, beta: f64) -> f64 {
    if !(y > 0.0 && y < 1.0) {
        log::debug!("beta density evaluated at {y}, outside (0, 1)");
        return f64::NEG_INFINITY;
    }
    ln_gamma(alpha + beta) - ln_gamma(alpha) - ln_gamma(beta)
        + (alpha - 1.0) * y.ln()
        + (beta - 1.0) * (-y).ln_1p()
}

pub(crate) fn linear_predictor(p: &RegressionParams, scaling: &CovariateScaling, x: Option<&[f64]>) -> f64 {
    let x = x.unwrap_or(&[]);
    p.coefs[0]
        + p.coefs[1..]
            .iter()
            .enumerate()
            .map(|(j, b)| b * scaling.apply(j, x.get(j).copied().unwrap_or(0.0)))
            .sum::<f64>()
}

impl ChainEmissions {
    pub fn family(&self) -> EmissionFamily {
        match self {
            ChainEmissions::Normal { .. } => EmissionFamily::Normal,
            ChainEmissions::Beta { .. } => EmissionFamily::Beta,
            ChainEmissions::NormalRegression { .. } => EmissionFamily::NormalRegression,
        }
    }

    pub fn num_states(&self) -> usize {
        match self {
            ChainEmissions::Normal { states } => states.len(),
            ChainEmissions::Beta { states } => states.len(),
            ChainEmissions::NormalRegression { states, .. } => states.len(),
        }
    }

    /// Number of covariates (regression only).
    pub fn num_covariates(&self) -> usize {
        match self {
            ChainEmissions::NormalRegression { states, .. } => {
                states.first().map_or(0, |s| s.coefs.len() - 1)
            }
            _ => 0,
        }
    }

    pub fn state(&self, s: usize) -> StateDensity<'_> {
        match self {
            ChainEmissions::Normal { states } => StateDensity::Normal(&states[s]),
            ChainEmissions::Beta { states } => StateDensity::Beta(&states[s]),
            ChainEmissions::NormalRegression { states, scaling } => {
                StateDensity::NormalRegression(&states[s], scaling)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64, what: &str| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(ChmmError::InvalidParameter(format!(
                    "{what} must be positive and finite, got {x}"
                )))
            }
        };
        match self {
            ChainEmissions::Normal { states } => {
                for s in states {
                    positive(s.sd, "normal sd")?;
                    if !s.mean.is_finite() {
                        return Err(ChmmError::InvalidParameter("normal mean not finite".into()));
                    }
                }
            }
            ChainEmissions::Beta { states } => {
                for s in states {
                    positive(s.alpha, "beta shape alpha")?;
                    positive(s.beta, "beta shape beta")?;
                }
            }
            ChainEmissions::NormalRegression { states, scaling } => {
                let p = self.num_covariates();
                for s in states {
                    positive(s.sd, "regression sd")?;
                    if s.coefs.len() != p + 1 || s.coefs.iter().any(|c| !c.is_finite()) {
                        return Err(ChmmError::InvalidParameter(
                            "regression coefficient vectors must share one length and be finite"
                                .into(),
                        ));
                    }
                }
                if !(scaling.center.is_empty() && scaling.scale.is_empty())
                    && (scaling.center.len() != p || scaling.scale.len() != p)
                {
                    return Err(ChmmError::Shape(format!(
                        "covariate scaling must have {p} entries"
                    )));
                }
            }
        }
        Ok(())
    }

    /// State-dependent mean used to order states (regression: the intercept).
    pub fn state_mean(&self, s: usize) -> f64 {
        match self {
            ChainEmissions::Normal { states } => states[s].mean,
            ChainEmissions::Beta { states } => states[s].alpha / (states[s].alpha + states[s].beta),
            ChainEmissions::NormalRegression { states, .. } => states[s].coefs[0],
        }
    }

    pub fn params_per_state(&self) -> usize {
        match self {
            ChainEmissions::Normal { .. } | ChainEmissions::Beta { .. } => 2,
            ChainEmissions::NormalRegression { .. } => self.num_covariates() + 2,
        }
    }

    pub fn num_working(&self) -> usize {
        self.params_per_state() * self.num_states()
    }

    /// Working values per state: normal `(μ, log σ)`, beta `(log α, log β)`,
    /// regression `(β₀ … β_p, log σ)`.
    pub fn to_working(&self) -> Vec<f64> {
        match self {
            ChainEmissions::Normal { states } => {
                states.iter().flat_map(|s| [s.mean, s.sd.ln()]).collect()
            }
            ChainEmissions::Beta { states } => states
                .iter()
                .flat_map(|s| [s.alpha.ln(), s.beta.ln()])
                .collect(),
            ChainEmissions::NormalRegression { states, .. } => states
                .iter()
                .flat_map(|s| s.coefs.iter().copied().chain([s.sd.ln()]))
                .collect(),
        }
    }

    /// Replaces the parameters with those encoded by `values`, keeping the family,
    /// state count and covariate scaling.
    pub fn with_working(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.num_working() {
            return Err(ChmmError::Shape(format!(
                "{} emissions need {} working values, got {}",
                self.family(),
                self.num_working(),
                values.len()
            )));
        }
        let per = self.params_per_state();
        let chunks = values.chunks(per);
        Ok(match self {
            ChainEmissions::Normal { .. } => ChainEmissions::Normal {
                states: chunks
                    .map(|c| NormalParams {
                        mean: c[0],
                        sd: c[1].exp(),
                    })
                    .collect(),
            },
            ChainEmissions::Beta { .. } => ChainEmissions::Beta {
                states: chunks
                    .map(|c| BetaParams {
                        alpha: c[0].exp(),
                        beta: c[1].exp(),
                    })
                    .collect(),
            },
            ChainEmissions::NormalRegression { scaling, .. } => ChainEmissions::NormalRegression {
                states: chunks
                    .map(|c| RegressionParams {
                        coefs: c[..per - 1].to_vec(),
                        sd: c[per - 1].exp(),
                    })
                    .collect(),
                scaling: scaling.clone(),
            },
        })
    }

    /// Adds `weight · ∂ log f(y | s)/∂(working)` into `out`, the working block of state `s`.
    pub fn accumulate_gradient(
        &self,
        s: usize,
        y: f64,
        covariates: Option<&[f64]>,
        weight: f64,
        out: &mut [f64],
    ) {
        match self {
            ChainEmissions::Normal { states } => {
                let p = &states[s];
                let z = (y - p.mean) / p.sd;
                out[0] += weight * z / p.sd;
                out[1] += weight * (z * z - 1.0);
            }
            ChainEmissions::Beta { states } => {
                let p = &states[s];
                let common = digamma(p.alpha + p.beta);
                out[0] += weight * p.alpha * (y.ln() - digamma(p.alpha) + common);
                out[1] += weight * p.beta * ((-y).ln_1p() - digamma(p.beta) + common);
            }
            ChainEmissions::NormalRegression { states, scaling } => {
                let p = &states[s];
                let mu = linear_predictor(p, scaling, covariates);
                let z = (y - mu) / p.sd;
                let g = weight * z / p.sd;
                out[0] += g;
                let x = covariates.unwrap_or(&[]);
                for j in 0..p.coefs.len() - 1 {
                    out[1 + j] += g * scaling.apply(j, x.get(j).copied().unwrap_or(0.0));
                }
                out[p.coefs.len()] += weight * (z * z - 1.0);
            }
        }
    }

    /// Relabels states: old state `s` becomes `perm[s]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        fn apply<T: Clone>(v: &[T], perm: &[usize]) -> Vec<T> {
            let mut out = v.to_vec();
            for (s, x) in v.iter().enumerate() {
                out[perm[s]] = x.clone();
            }
            out
        }
        match self {
            ChainEmissions::Normal { states } => ChainEmissions::Normal {
                states: apply(states, perm),
            },
            ChainEmissions::Beta { states } => ChainEmissions::Beta {
                states: apply(states, perm),
            },
            ChainEmissions::NormalRegression { states, scaling } => {
                ChainEmissions::NormalRegression {
                    states: apply(states, perm),
                    scaling: scaling.clone(),
                }
            }
        }
    }

    /// Labelled natural parameters, 1-based state labels.
    pub fn natural_parameters(&self, stream: usize) -> Vec<(String, f64)> {
        let m = stream + 1;
        match self {
            ChainEmissions::Normal { states } => states
                .iter()
                .enumerate()
                .flat_map(|(s, p)| {
                    [
                        (format!("mean[{m},{}]", s + 1), p.mean),
                        (format!("sd[{m},{}]", s + 1), p.sd),
                    ]
                })
                .collect(),
            ChainEmissions::Beta { states } => states
                .iter()
                .enumerate()
                .flat_map(|(s, p)| {
                    [
                        (format!("alpha[{m},{}]", s + 1), p.alpha),
                        (format!("beta[{m},{}]", s + 1), p.beta),
                    ]
                })
                .collect(),
            ChainEmissions::NormalRegression { states, .. } => states
                .iter()
                .enumerate()
                .flat_map(|(s, p)| {
                    p.coefs
                        .iter()
                        .enumerate()
                        .map(move |(j, &b)| (format!("beta{j}[{m},{}]", s + 1), b))
                        .chain([(format!("sd[{m},{}]", s + 1), p.sd)])
                })
                .collect(),
        }
    }

    /// Data-driven starting values. States split the observed values at
    /// quantiles; `rng` jitters the split points when given.
    pub fn initial<R: Rng + ?Sized>(
        family: EmissionFamily,
        num_states: usize,
        values: &[f64],
        num_covariates: usize,
        scaling: CovariateScaling,
        rng: Option<&mut R>,
    ) -> Result<Self> {
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.is_empty() {
            return Err(ChmmError::Data("stream has no observed values".into()));
        }
        sorted.sort_by(f64::total_cmp);
        let len = sorted.len();
        let mut edges: Vec<f64> = (0..=num_states)
            .map(|s| s as f64 / num_states as f64)
            .collect();
        if let Some(rng) = rng {
            for e in edges.iter_mut().take(num_states).skip(1) {
                *e += rng.random_range(-0.25..0.25) / num_states as f64;
            }
        }
        let band = |s: usize| -> &[f64] {
            let lo = ((edges[s] * len as f64) as usize).min(len - 1);
            let hi = ((edges[s + 1] * len as f64) as usize).clamp(lo + 1, len);
            &sorted[lo..hi]
        };
        let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let overall_mean = mean_of(&sorted);
        let overall_sd = (sorted.iter().map(|v| (v - overall_mean).powi(2)).sum::<f64>()
            / len as f64)
            .sqrt();
        let sd = (overall_sd / num_states as f64).max(1e-3 * overall_sd.max(1e-12));
        Ok(match family {
            EmissionFamily::Normal => ChainEmissions::Normal {
                states: (0..num_states)
                    .map(|s| NormalParams {
                        mean: mean_of(band(s)),
                        sd,
                    })
                    .collect(),
            },
            EmissionFamily::NormalRegression => ChainEmissions::NormalRegression {
                states: (0..num_states)
                    .map(|s| {
                        let mut coefs = vec![0.0; num_covariates + 1];
                        coefs[0] = mean_of(band(s));
                        RegressionParams { coefs, sd }
                    })
                    .collect(),
                scaling,
            },
            EmissionFamily::Beta => ChainEmissions::Beta {
                states: (0..num_states)
                    .map(|s| {
                        let b = band(s);
                        let m = mean_of(b).clamp(1e-6, 1.0 - 1e-6);
                        let v = b.iter().map(|x| (x - m).powi(2)).sum::<f64>() / b.len() as f64;
                        let phi = if v > 0.0 {
                            (m * (1.0 - m) / v - 1.0).clamp(2.0, 1e4)
                        } else {
                            1e2
                        };
                        BetaParams {
                            alpha: m * phi,
                            beta: (1.0 - m) * phi,
                        }
                    })
                    .collect(),
            },
        })
    }
}

/// Emission parameters of all observation streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmissionSpec {
    streams: Vec<ChainEmissions>,
}

impl EmissionSpec {
    pub fn new(streams: Vec<ChainEmissions>) -> Result<Self> {
        if streams.is_empty() {
            return Err(ChmmError::Shape("at least one observation stream required".into()));
        }
        let n = streams[0].num_states();
        for s in &streams {
            s.validate()?;
            if s.num_states() != n {
                return Err(ChmmError::Shape(
                    "every stream must have the same number of states".into(),
                ));
            }
        }
        Ok(Self { streams })
    }

    pub fn streams(&self) -> &[ChainEmissions] {
        &self.streams
    }

    pub fn stream(&self, m: usize) -> &ChainEmissions {
        &self.streams[m]
    }

    pub fn num_streams(&self) -> usize {
        self.streams.len()
    }

    pub fn num_states(&self) -> usize {
        self.streams[0].num_states()
    }

    pub fn num_working(&self) -> usize {
        self.streams.iter().map(ChainEmissions::num_working).sum()
    }

    pub fn to_working(&self) -> Vec<f64> {
        self.streams.iter().flat_map(|s| s.to_working()).collect()
    }

    pub fn with_working(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.num_working() {
            return Err(ChmmError::Shape(format!(
                "emissions need {} working values, got {}",
                self.num_working(),
                values.len()
            )));
        }
        let mut off = 0;
        let streams = self
            .streams
            .iter()
            .map(|s| {
                let w = s.num_working();
                let out = s.with_working(&values[off..off + w]);
                off += w;
                out
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { streams })
    }

    pub(crate) fn with_stream(&self, m: usize, stream: ChainEmissions) -> Self {
        let mut streams = self.streams.clone();
        streams[m] = stream;
        Self { streams }
    }

    pub fn natural_parameters(&self) -> Vec<(String, f64)> {
        self.streams
            .iter()
            .enumerate()
            .flat_map(|(m, s)| s.natural_parameters(m))
            .collect()
    }
}

/// Row-major `T × p` covariate matrix of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    num: usize,
    values: Vec<f64>,
}

impl Covariates {
    pub fn new(num: usize, values: Vec<f64>) -> Result<Self> {
        if num == 0 || !values.len().is_multiple_of(num) {
            return Err(ChmmError::Shape(format!(
                "{} covariate values do not form rows of {num}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ChmmError::Data("covariates must be finite".into()));
        }
        Ok(Self { num, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num) {
            return Err(ChmmError::Shape("ragged covariate rows".into()));
        }
        Self::new(num, rows.concat())
    }

    pub fn num(&self) -> usize {
        self.num
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.num
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.num..(t + 1) * self.num]
    }

    fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            num: self.num,
            values: self.values[start * self.num..end * self.num].to_vec(),
        }
    }
}

/// `T × M` observations with a missing-value mask and optional per-stream covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    len: usize,
    num_streams: usize,
    values: Vec<f64>,
    missing: Vec<bool>,
    covariates: Vec<Option<Covariates>>,
}

impl ObservationSet {
    /// `rows[t][m]`, with `None` marking a missing observation.
    pub fn from_rows(rows: &[Vec<Option<f64>>], covariates: Vec<Option<Covariates>>) -> Result<Self> {
        let num_streams = rows.first().map_or(covariates.len(), Vec::len);
        if rows.iter().any(|r| r.len() != num_streams) {
            return Err(ChmmError::Shape("ragged observation rows".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * num_streams);
        let mut missing = Vec::with_capacity(rows.len() * num_streams);
        for (t, row) in rows.iter().enumerate() {
            for (m, v) in row.iter().enumerate() {
                match v {
                    Some(x) if x.is_finite() => {
                        values.push(*x);
                        missing.push(false);
                    }
                    Some(x) => {
                        return Err(ChmmError::Data(format!(
                            "non-finite observation {x} at row {t}, stream {}",
                            m + 1
                        )))
                    }
                    None => {
                        values.push(f64::NAN);
                        missing.push(true);
                    }
                }
            }
        }
        let out = Self {
            len: rows.len(),
            num_streams,
            values,
            missing,
            covariates,
        };
        out.check_covariates()?;
        Ok(out)
    }

    /// Fully observed data without covariates.
    pub fn from_complete(rows: &[Vec<f64>]) -> Result<Self> {
        let rows: Vec<Vec<Option<f64>>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| Some(v)).collect())
            .collect();
        let m = rows.first().map_or(0, Vec::len);
        Self::from_rows(&rows, vec![None; m])
    }

    fn check_covariates(&self) -> Result<()> {
        if self.covariates.len() != self.num_streams {
            return Err(ChmmError::Shape(format!(
                "need one covariate entry per stream ({}), got {}",
                self.num_streams,
                self.covariates.len()
            )));
        }
        for (m, c) in self.covariates.iter().enumerate() {
            if let Some(c) = c {
                if c.len() != self.len {
                    return Err(ChmmError::Shape(format!(
                        "covariates of stream {} have {} rows, observations have {}",
                        m + 1,
                        c.len(),
                        self.len
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_streams(&self) -> usize {
        self.num_streams
    }

    pub fn value(&self, t: usize, m: usize) -> Option<f64> {
        let i = t * self.num_streams + m;
        (!self.missing[i]).then(|| self.values[i])
    }

    pub fn is_missing(&self, t: usize, m: usize) -> bool {
        self.missing[t * self.num_streams + m]
    }

    pub fn covariates(&self, m: usize) -> Option<&Covariates> {
        self.covariates[m].as_ref()
    }

    pub fn covariate_row(&self, t: usize, m: usize) -> Option<&[f64]> {
        self.covariates[m].as_ref().map(|c| c.row(t))
    }

    /// Observed values of stream `m`.
    pub fn stream_values(&self, m: usize) -> Vec<f64> {
        (0..self.len).filter_map(|t| self.value(t, m)).collect()
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        let (a, b) = (start * self.num_streams, end * self.num_streams);
        Self {
            len: end - start,
            num_streams: self.num_streams,
            values: self.values[a..b].to_vec(),
            missing: self.missing[a..b].to_vec(),
            covariates: self
                .covariates
                .iter()
                .map(|c| c.as_ref().map(|c| c.slice(start, end)))
                .collect(),
        }
    }

    pub fn concat(&self, other: &ObservationSet) -> Result<Self> {
        if self.num_streams != other.num_streams {
            return Err(ChmmError::Shape("stream counts differ".into()));
        }
        let covariates = self
            .covariates
            .iter()
            .zip(&other.covariates)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) if a.num == b.num => Ok(Some(Covariates {
                    num: a.num,
                    values: [a.values.as_slice(), b.values.as_slice()].concat(),
                })),
                (None, None) => Ok(None),
                _ => Err(ChmmError::Shape("covariate layouts differ".into())),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            len: self.len + other.len,
            num_streams: self.num_streams,
            values: [self.values.as_slice(), other.values.as_slice()].concat(),
            missing: [self.missing.as_slice(), other.missing.as_slice()].concat(),
            covariates,
        })
    }

    /// Copy with observation `(t, m)` marked missing.
    pub fn with_missing(&self, t: usize, m: usize) -> Self {
        let mut out = self.clone();
        let i = t * self.num_streams + m;
        out.missing[i] = true;
        out.values[i] = f64::NAN;
        out
    }

    /// Replaces the values of stream `m` (used after zero-shifting).
    pub fn with_stream_values(&self, m: usize, column: &[f64]) -> Result<Self> {
        if column.len() != self.len {
            return Err(ChmmError::Shape("column length differs from series length".into()));
        }
        let mut out = self.clone();
        for (t, &v) in column.iter().enumerate() {
            if !out.missing[t * self.num_streams + m] {
                out.values[t * self.num_streams + m] = v;
            }
        }
        Ok(out)
    }
}

/// Which state each observation stream reads in every latent state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMap {
    latent_dim: usize,
    num_streams: usize,
    table: Vec<usize>,
}

impl StateMap {
    /// Product space: stream m reads component m of the product state.
    pub fn product(space: &StateSpace) -> Self {
        Self {
            latent_dim: space.product_dim(),
            num_streams: space.num_chains(),
            table: space.component_table().concat(),
        }
    }

    /// One latent chain read by every stream.
    pub fn shared(num_states: usize, num_streams: usize) -> Self {
        Self {
            latent_dim: num_states,
            num_streams,
            table: (0..num_states)
                .flat_map(|k| std::iter::repeat_n(k, num_streams))
                .collect(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_streams(&self) -> usize {
        self.num_streams
    }

    pub fn state_of(&self, k: usize, m: usize) -> usize {
        self.table[k * self.num_streams + m]
    }
}

/// Per-stream, per-state log densities at time `t`; `None` for missing values.
pub(crate) fn stream_log_densities(
    spec: &EmissionSpec,
    obs: &ObservationSet,
    t: usize,
) -> Vec<Option<Vec<f64>>> {
    spec.streams
        .iter()
        .enumerate()
        .map(|(m, e)| {
            obs.value(t, m).map(|y| {
                let x = obs.covariate_row(t, m);
                (0..e.num_states())
                    .map(|s| log_density(e.state(s), y, x))
                    .collect()
            })
        })
        .collect()
}

/// Log of the diagonal of the emission matrix at time `t`.
pub fn emission_diag(
    spec: &EmissionSpec,
    obs: &ObservationSet,
    t: usize,
    map: &StateMap,
) -> Result<Vec<f64>> {
    if spec.num_streams() != obs.num_streams() || map.num_streams() != obs.num_streams() {
        return Err(ChmmError::Shape(format!(
            "model has {} streams, data has {}",
            spec.num_streams(),
            obs.num_streams()
        )));
    }
    if t >= obs.len() {
        return Err(ChmmError::Domain(format!("time index {t} beyond series length {}", obs.len())));
    }
    let per_stream = stream_log_densities(spec, obs, t);
    let mut out = vec![0.0; map.latent_dim()];
    for (k, slot) in out.iter_mut().enumerate() {
        for (m, d) in per_stream.iter().enumerate() {
            if let Some(d) = d {
                *slot += d[map.state_of(k, m)];
            }
        }
    }
    if let Some(bad) = out.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
        return Err(ChmmError::Numeric(format!(
            "emission log-density {bad} at time index {t}"
        )));
    }
    Ok(out)
}

/// Replaces exact zeros by independent Uniform(1e-8, 1e-6) draws, reproducibly.
/// Missing values (NaN) pass through untouched.
pub fn shift_zeros(column: &[f64], seed: u64) -> Result<Vec<f64>> {
    if let Some((t, v)) = column
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_nan() && !(0.0..1.0).contains(*v))
    {
        return Err(ChmmError::Data(format!(
            "beta-family value {v} at row {t} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(column
        .iter()
        .map(|&v| {
            if v == 0.0 {
                loop {
                    let e = rng.random_range(1e-8..1e-6);
                    if e > 1e-8 {
                        break e;
                    }
                }
            } else {
                v
            }
        })
        .collect())
}
